use crate::{CliError, Context};
use movepred_core::gradsuite::gradient_suite;

pub fn gradcheck(ctx: &Context) -> anyhow::Result<()> {
    let report = gradient_suite(ctx.seed)?;
    ctx.out.write_json("gradcheck.json", &report)?;
    crate::output::write_run(&ctx.out, "gradcheck", ctx.seed, &serde_json::json!({ "tolerance": report.tolerance }))?;
    let width = report.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>6}  {:>10}  result", "case", "coords", "max rel");
    for c in &report.cases {
        println!(
            "{:<width$}  {:>6}  {:>10.2e}  {}",
            c.name,
            c.coordinates,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} cases, worst {:.2e} (tolerance {:.0e}), {:.2}s",
        report.cases.len(),
        report.max_rel_error(),
        report.tolerance,
        report.elapsed.as_secs_f64()
    );
    if !report.passed() {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
