//! Writes a synthetic corpus as CSV to stdout.
//!
//! Usage: `cargo run -p pathcodes-core --example synth_corpus -- [N_CASES] [SEED] [NOISE]`

use std::io::Write;

use pathcodes_core::synth::{synth_csv, SynthConfig};

fn main() {
    let defaults = SynthConfig::default();
    let mut args = std::env::args().skip(1);
    let config = SynthConfig {
        n_cases: args.next().map_or(defaults.n_cases, |a| a.parse().expect("N_CASES is an integer")),
        seed: args.next().map_or(defaults.seed, |a| a.parse().expect("SEED is an integer")),
        noise: args.next().map_or(defaults.noise, |a| a.parse().expect("NOISE is a number")),
    };
    std::io::stdout()
        .write_all(&synth_csv(&config))
        .expect("stdout is writable");
}
