//! Drives the command-line interface in-process: generate a corpus and print
//! its statistics.

fn main() {
    let dir = std::env::temp_dir().join("comer-cli-example");
    let _ = std::fs::remove_dir_all(&dir);
    let args = ["comer", "gen", "--out", dir.to_str().unwrap(), "--n", "50", "--seed", "9"];
    let code = comer::cli::main_with(args.iter().map(|s| s.to_string()));
    println!("exit code {code}");
}
