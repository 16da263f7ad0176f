use crate::fail::Failure;
use caf_core::autodiff::gradcheck::GradCheckConfig;
use caf_core::checks::standard_grad_checks;

pub fn run(samples: usize, eps: f64, seed: u64, tol: f64) -> Result<(), Failure> {
    if samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Failure::usage("--eps must be a positive number"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Failure::usage("--tol must be a positive number"));
    }
    let cfg = GradCheckConfig {
        eps,
        samples_per_param: samples,
        seed,
        kink_threshold: GradCheckConfig::default().kink_threshold,
    };
    let rows = standard_grad_checks(&cfg)?;

    println!("{:<28} {:>8} {:>8} {:>13}  result", "op", "checked", "skipped", "max_rel_err");
    let mut failures = 0;
    for row in &rows {
        let ok = row.passes(tol);
        if !ok {
            failures += 1;
        }
        println!(
            "{:<28} {:>8} {:>8} {:>13.3e}  {}",
            row.name,
            row.report.checked,
            row.report.skipped,
            row.report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(Failure::numerical(format!(
            "{failures} of {} gradient checks exceeded tolerance {tol}",
            rows.len()
        )));
    }
    println!("all {} checks within {tol}", rows.len());
    Ok(())
}
