fn main() {
    std::process::exit(twoscale::cli::run(std::env::args_os()));
}
