//! Deterministic synthetic pathology-style corpora for tests and demos.
//!
//! Cases draw a code combination from a fixed skewed table, so a few
//! combinations dominate and a tail stays rare. A small share of cases is
//! deliberately defective (no final report, no codes, out-of-range codes) or
//! split across several rows, to exercise curation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub seed: u64,
    /// Probability that a case carries a defect or an extra row.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 200,
            seed: 17,
            noise: 0.04,
        }
    }
}

struct Finding {
    code: &'static str,
    site: &'static str,
    diagnosis: &'static str,
}

const FINDINGS: &[Finding] = &[
    Finding { code: "C12", site: "right base of tongue", diagnosis: "invasive squamous cell carcinoma" },
    Finding { code: "C77", site: "lymph node, neck dissection", diagnosis: "metastatic carcinoma in lymph node" },
    Finding { code: "C44", site: "skin, left cheek", diagnosis: "basal cell carcinoma, nodular type" },
    Finding { code: "C50", site: "left breast", diagnosis: "invasive ductal carcinoma, grade 2" },
    Finding { code: "C61", site: "prostate, needle core", diagnosis: "prostatic adenocarcinoma, Gleason 3+4" },
    Finding { code: "C18", site: "sigmoid colon", diagnosis: "invasive adenocarcinoma, moderately differentiated" },
    Finding { code: "C34", site: "right upper lobe of lung", diagnosis: "non-small cell carcinoma, favor adenocarcinoma" },
    Finding { code: "C43", site: "skin, upper back", diagnosis: "malignant melanoma, superficial spreading type" },
    Finding { code: "D05", site: "right breast", diagnosis: "ductal carcinoma in situ, solid type" },
    Finding { code: "C56", site: "left ovary", diagnosis: "high grade serous carcinoma" },
    Finding { code: "C78", site: "omentum", diagnosis: "metastatic high grade carcinoma" },
    Finding { code: "C73", site: "thyroid, left lobe", diagnosis: "papillary thyroid carcinoma" },
    Finding { code: "D12", site: "transverse colon polyp", diagnosis: "tubular adenoma" },
];

/// (codes, weight)
const COMBINATIONS: &[(&[&str], f64)] = &[
    (&["C44"], 30.0),
    (&["C50"], 18.0),
    (&["C61"], 12.0),
    (&["C12", "C77"], 8.0),
    (&["C18"], 8.0),
    (&["C34"], 6.0),
    (&["C43"], 5.0),
    (&["C50", "C77"], 4.0),
    (&["C50", "D05"], 3.0),
    (&["C56", "C78"], 2.0),
    (&["C73"], 2.0),
    (&["D12"], 1.5),
    (&["C18", "C77", "C78"], 0.5),
];

const TISSUES: &[&str] = &[
    "tan-pink soft tissue",
    "white-tan fibrofatty tissue",
    "gray-white firm tissue",
    "portion of skin with underlying subcutaneous tissue",
    "multiple cores of tan tissue",
];

const FILLER: &[&str] = &[
    "The specimen is inked and serially sectioned.",
    "Representative sections are submitted in cassettes A1 through A4.",
    "The cut surface shows a well-circumscribed lesion.",
    "Margins are grossly free of the lesion.",
    "The remaining tissue is retained in formalin.",
    "Entirely submitted after decalcification.",
    "No additional lesions are identified.",
];

fn finding(code: &str) -> &'static Finding {
    FINDINGS.iter().find(|f| f.code == code).expect("finding table covers every code")
}

fn pick_combination(rng: &mut ChaCha8Rng) -> &'static [&'static str] {
    let total: f64 = COMBINATIONS.iter().map(|(_, w)| w).sum();
    let mut x = rng.random_range(0.0..total);
    for (combo, w) in COMBINATIONS {
        if x < *w {
            return combo;
        }
        x -= w;
    }
    COMBINATIONS[0].0
}

/// One delimited row: `case_id,gross,final,codes` with `;`-joined codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRow {
    pub case_id: String,
    pub gross: String,
    pub final_text: String,
    pub codes: String,
}

fn gross_text(rng: &mut ChaCha8Rng, id: &str, part: usize, site: &str) -> String {
    let (a, b, c) = (
        rng.random_range(0.2..6.0f64),
        rng.random_range(0.2..4.0f64),
        rng.random_range(0.1..2.0f64),
    );
    let tissue = TISSUES[rng.random_range(0..TISSUES.len())];
    let mut text = format!(
        "Specimen {id} part {part}: received in formalin labeled \"{site}\" is {tissue} measuring {a:.1} x {b:.1} x {c:.1} cm."
    );
    for _ in 0..rng.random_range(0..6) {
        text.push(' ');
        text.push_str(FILLER[rng.random_range(0..FILLER.len())]);
    }
    text
}

pub fn synth_rows(config: &SynthConfig) -> Vec<SynthRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.n_cases);
    for i in 0..config.n_cases {
        let id = format!("S{i:05}");
        let combo = pick_combination(&mut rng);
        let findings: Vec<&Finding> = combo.iter().map(|c| finding(c)).collect();

        let gross = findings
            .iter()
            .enumerate()
            .map(|(k, f)| gross_text(&mut rng, &id, k + 1, f.site))
            .collect::<Vec<_>>()
            .join(" ");
        let final_text = findings
            .iter()
            .map(|f| format!("{}: {}.", f.site.to_uppercase(), f.diagnosis))
            .collect::<Vec<_>>()
            .join(" ");
        let mut codes: Vec<String> = combo.iter().map(|c| c.to_string()).collect();

        let defect = rng.random_bool(config.noise.clamp(0.0, 1.0));
        let kind = rng.random_range(0..4u8);
        let mut row = SynthRow {
            case_id: id.clone(),
            gross,
            final_text,
            codes: String::new(),
        };
        if defect {
            match kind {
                0 => row.final_text.clear(),
                1 => codes.clear(),
                2 => codes.push("Z85.3".into()),
                _ => {
                    // The last code moves to a second row of the same case.
                    if codes.len() > 1 {
                        let moved = codes.pop().unwrap_or_default();
                        row.codes = codes.join(";");
                        rows.push(row);
                        rows.push(SynthRow {
                            case_id: id.clone(),
                            gross: gross_text(&mut rng, &id, 9, "additional specimen"),
                            final_text: "ADDITIONAL SPECIMEN: see comment.".into(),
                            codes: moved,
                        });
                        continue;
                    }
                    codes.push("K63.5".into());
                }
            }
        }
        row.codes = codes.join(";");
        rows.push(row);
    }
    rows
}

/// The rows as comma-delimited text with a header, LF line endings.
pub fn synth_csv(config: &SynthConfig) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer
        .write_record(["case_id", "gross", "final", "codes"])
        .expect("in-memory write");
    for row in synth_rows(config) {
        writer
            .write_record([&row.case_id, &row.gross, &row.final_text, &row.codes])
            .expect("in-memory write");
    }
    writer.into_inner().expect("in-memory writer flushes")
}
