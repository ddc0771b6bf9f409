fn main() {
    std::process::exit(bgformer::run());
}
