fn main() {
    std::process::exit(mvcwm::cli::run(std::env::args_os()));
}
