mod cli;
mod desk;
mod inverse;
mod physics;

pub use cli::reproducibility;
pub use desk::{codec, diffusion, Context};
pub use inverse::{dps, pdps};
pub use physics::{gradients, physics};

#[derive(Default)]
pub struct Report {
    checks: Vec<(String, bool, String)>,
}

impl Report {
    pub fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push((name.to_string(), ok, detail.into()));
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.1)
    }

    /// Failing checks other than the listed ones.
    pub fn unexpected_failures(&self, known: &[&str]) -> usize {
        self.checks.iter().filter(|c| !c.1 && !known.contains(&c.0.as_str())).count()
    }

    pub fn line(&self, id: usize, name: &str, secs: f64) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let parts: Vec<String> = self
            .checks
            .iter()
            .map(|(n, ok, d)| format!("{}{n}: {d}", if *ok { "" } else { "FAILED " }))
            .collect();
        format!("criterion {id} ({name}): {verdict} [{:.0}s] {}", secs, parts.join("; "))
    }
}
