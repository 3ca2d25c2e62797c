//! Central finite differences against every analytic gradient.

use rabc_seg::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> rabc_seg::Result<()> {
    let report = run_gradcheck(&GradcheckConfig::default())?;
    print!("{}", report.summary());
    if !report.passed {
        std::process::exit(4);
    }
    Ok(())
}
