use clap::Parser;

fn main() {
    let cli = advlab_cli::Cli::parse();
    std::process::exit(advlab_cli::run(cli));
}
