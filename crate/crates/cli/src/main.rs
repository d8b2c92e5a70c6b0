use clap::Parser;

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() {
    ofdiff_cli::logging::init();
    let cli = ofdiff_cli::Cli::parse();
    if let Err(e) = ofdiff_cli::run(cli) {
        log::error!("{}", describe(&e));
        std::process::exit(1);
    }
}
