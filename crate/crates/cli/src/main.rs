use clap::Parser;

fn main() {
    let cli = fedmoco_cli::Cli::parse();
    if let Err(e) = fedmoco_cli::execute(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
