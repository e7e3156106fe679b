use clap::Parser;
use edgebench_cli::host::host_main;
use edgebench_cli::spec::{HostFlags, HostRunSpec};

/// Runs one benchmark session and writes a report per target.
#[derive(Parser)]
#[command(name = "bench-host", version)]
struct Cli {
    #[command(flatten)]
    flags: HostFlags,
}

fn main() {
    edgebench_cli::init_logging();
    let cli = Cli::parse();
    let code = match HostRunSpec::resolve(&cli.flags).map_err(Into::into).and_then(|spec| host_main(&spec)) {
        Ok(run) => {
            for path in &run.written {
                println!("{}", path.display());
            }
            run.exit_code()
        }
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
