fn main() {
    std::process::exit(splatcal::run_cli());
}
