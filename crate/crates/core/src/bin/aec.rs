fn main() {
    std::process::exit(aec::cli::dispatch(std::env::args_os()));
}
