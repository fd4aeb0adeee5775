fn main() {
    std::process::exit(graspflow::cli::run(std::env::args_os()));
}
