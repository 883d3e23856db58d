fn main() {
    std::process::exit(pip_hsi::run(std::env::args_os()));
}
