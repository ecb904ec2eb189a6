fn main() {
    std::process::exit(iterseg::cli::dispatch(std::env::args_os()));
}
