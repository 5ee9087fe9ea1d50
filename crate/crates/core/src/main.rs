use clap::Parser;

fn main() {
    let args = dgsi::cli::Args::parse();
    std::process::exit(dgsi::cli::main_with(args));
}
