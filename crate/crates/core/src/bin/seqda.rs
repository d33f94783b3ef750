fn main() {
    std::process::exit(seqda::cli::run(std::env::args_os()));
}
