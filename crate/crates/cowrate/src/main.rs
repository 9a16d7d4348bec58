use clap::Parser;

fn main() {
    let cli = cowrate::cli::Cli::parse();
    std::process::exit(cowrate::cli::main_with(cli));
}
