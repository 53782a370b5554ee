fn main() {
    std::process::exit(patchcap::cli::run(std::env::args_os()));
}
