fn main() {
    std::process::exit(reslstm::cli::run(std::env::args_os()));
}
