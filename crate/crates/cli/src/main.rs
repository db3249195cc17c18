fn main() {
    std::process::exit(boter_cli::dispatch(std::env::args_os()));
}
