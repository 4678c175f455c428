use clap::Parser;

fn main() {
    let cli = sem_forge::cli::Cli::parse();
    std::process::exit(sem_forge::cli::run(cli));
}
