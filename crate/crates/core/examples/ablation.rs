//! Runs the ablation sweep through the experiment runner, as the CLI's
//! `ablate` verb does, and prints the trend table.

use idslab::runner::{run, Command, RunOptions};

fn main() -> idslab::Result<()> {
    let dir = std::env::temp_dir().join("idslab-ablation-example");
    std::fs::create_dir_all(&dir).map_err(|e| idslab::Error::io(&dir, e))?;
    let config = dir.join("config.json");
    let body = r#"{"schema": 1, "name": "ablation-example",
        "ablation": {"lambdas": [0.1, 0.3, 1.0], "seeds": 2, "steps": [100, 200]}}"#;
    std::fs::write(&config, body).map_err(|e| idslab::Error::io(&config, e))?;
    let opts = RunOptions {
        out: dir.join("out"),
        jobs: Some(4),
        seed: None,
    };
    let out = run(Command::Ablate, &config, &opts)?;
    let trend = out.join("lambda_trend.csv");
    print!(
        "{}",
        std::fs::read_to_string(&trend).map_err(|e| idslab::Error::io(&trend, e))?
    );
    println!("full results in {}", out.display());
    Ok(())
}
