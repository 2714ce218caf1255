use clap::Parser;
use sqnt_cli::commands;

/// Weight-only quantization and selective-prediction reliability for a
/// desk-scale two-modality decoder.
#[derive(Parser)]
#[command(name = "sqnt", version, about)]
enum Cli {
    /// Generate the synthetic task (splits + calibration batch).
    GenTask(commands::GenTaskArgs),
    /// Initialize and train the decoder; write its fp32 checkpoint.
    InitModel(commands::InitModelArgs),
    /// Quantize a checkpoint (bf16 passthrough, RTN/HQQ, or MBQ).
    Quantize(commands::QuantizeArgs),
    /// Decode one split and write prediction records.
    Eval(commands::EvalArgs),
    /// Train the selector confidence estimator on a records file.
    TrainSelector(commands::TrainSelectorArgs),
    /// Replace confidences in a records file with selector predictions.
    Rescore(commands::RescoreArgs),
    /// Compute the reliability report (and optional curve CSV).
    Report(commands::ReportArgs),
    /// ID/OOD mixture sweep at a fixed threshold.
    Mix(commands::MixArgs),
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match cli {
        Cli::GenTask(args) => commands::gen_task::run(args),
        Cli::InitModel(args) => commands::init_model::run(args),
        Cli::Quantize(args) => commands::quantize::run(args),
        Cli::Eval(args) => commands::eval::run(args),
        Cli::TrainSelector(args) => commands::train_selector::run(args),
        Cli::Rescore(args) => commands::rescore::run(args),
        Cli::Report(args) => commands::report::run(args),
        Cli::Mix(args) => commands::mix::run(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code())
        }
    }
}
