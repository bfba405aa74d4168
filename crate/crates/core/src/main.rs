fn main() {
    std::process::exit(labelsearch::cli::dispatch(std::env::args_os()));
}
