fn main() {
    std::process::exit(chatter_core::cli::run(std::env::args_os()));
}
