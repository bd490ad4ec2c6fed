fn main() {
    std::process::exit(shuffle_former::cli::run(std::env::args_os()));
}
