fn main() {
    std::process::exit(unshift::run_cli());
}
