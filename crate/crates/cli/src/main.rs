fn main() {
    std::process::exit(musiclink_cli::run(std::env::args_os()));
}
