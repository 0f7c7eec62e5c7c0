//! Writes a small synthetic model and calibration set for trying the CLI.
//!
//! cargo run -p zipkit-core --example synth_chain -- <out-dir> [samples] [seed]

use std::path::PathBuf;
use std::process::ExitCode;

use zipkit::synth::{synth_calibration, synth_model, SynthLayer, SynthSpec};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synth_chain <out-dir> [samples] [seed]");
        return ExitCode::from(1);
    };
    let samples = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec {
        hidden: 64,
        layers: vec![
            SynthLayer::Heads { heads: 8, head_dim: 8 },
            SynthLayer::Ffn { width: 256 },
            SynthLayer::Heads { heads: 8, head_dim: 8 },
            SynthLayer::Ffn { width: 256 },
        ],
        input_rank: 24,
        noise: 0.05,
        seed,
    };
    let run = || -> zipkit::Result<()> {
        let model = synth_model(&spec)?;
        model.save(out.join("model"))?;
        synth_calibration(&model, &spec, samples, 0)?.save(out.join("calibration"))?;
        Ok(())
    };
    match run() {
        Ok(()) => {
            println!("wrote {}/model and {}/calibration", out.display(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
