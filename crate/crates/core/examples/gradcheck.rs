//! Autodiff vs central finite differences for the two last-layer gradients
//! behind the adaptive adversarial weight.

use manga_colorize::losses::{adaptive_weight, LossConfig};
use manga_colorize::pipeline::{gradcheck, GradcheckConfig};

fn main() -> manga_colorize::Result<()> {
    let report = gradcheck(&GradcheckConfig::default())?;
    println!("probed {} output-conv weights", report.entries);
    println!(
        "reconstruction  |g| autodiff {:.6e}  fd {:.6e}  rel error {:.2e}",
        report.reconstruction_norm, report.reconstruction_norm_fd, report.reconstruction_rel_error
    );
    println!(
        "adversarial     |g| autodiff {:.6e}  fd {:.6e}  rel error {:.2e}",
        report.adversarial_norm, report.adversarial_norm_fd, report.adversarial_rel_error
    );
    println!(
        "adaptive weight {:.6} (fd {:.6})",
        report.adaptive_weight, report.adaptive_weight_fd
    );

    let cfg = LossConfig::default();
    for (rec, adv) in [(1.0, 1.0), (2.0, 1.0), (1.0, 0.0)] {
        println!("w({rec}, {adv}) = {}", adaptive_weight(rec, adv, &cfg)?);
    }
    Ok(())
}
