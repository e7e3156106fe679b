use clap::Parser;
use edgebench_cli::target::{build_registry, target_main, TargetFlags};

/// Serves benchmark sessions until terminated.
#[derive(Parser)]
#[command(name = "bench-target", version)]
struct Cli {
    #[command(flatten)]
    flags: TargetFlags,
}

fn main() {
    edgebench_cli::init_logging();
    let cli = Cli::parse();
    if cli.flags.list_plugins {
        match build_registry(&cli.flags) {
            Ok(registry) => {
                for name in registry.names() {
                    println!("{name}");
                }
                return;
            }
            Err(e) => {
                log::error!("{e}");
                std::process::exit(e.exit_code());
            }
        }
    }
    let (tx, rx) = crossbeam_channel::bounded(1);
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.try_send(());
    }) {
        log::error!("installing the signal handler failed: {e}");
        std::process::exit(edgebench_cli::EXIT_SESSION_FAILED);
    }
    if let Err(e) = target_main(&cli.flags, rx) {
        log::error!("{e}");
        std::process::exit(e.exit_code());
    }
}
