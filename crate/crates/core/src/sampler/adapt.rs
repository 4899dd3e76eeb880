//! Warmup adaptation: dual-averaging step-size search and diagonal
//! mass-matrix estimation over expanding windows.

/// Nesterov dual averaging of the log step size, driving the mean acceptance
/// statistic toward a target (Hoffman & Gelman 2014, Algorithm 6 constants).
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    target_accept: f64,
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    step: u64,
}

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(initial_step_size: f64, target_accept: f64) -> Self {
        Self {
            target_accept,
            mu: (10.0 * initial_step_size).ln(),
            log_eps: initial_step_size.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            step: 0,
        }
    }

    /// Restart after a mass-matrix update. The anchor sits on the step size
    /// itself: the usual 10x exploration bias would wreck the short final
    /// adaptation stretch with an acceptance crash it cannot drain in time.
    pub fn restarted(step_size: f64, target_accept: f64) -> Self {
        Self {
            mu: step_size.ln(),
            ..Self::new(step_size, target_accept)
        }
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// The averaged step size to freeze for post-warmup sampling.
    pub fn adapted(&self) -> f64 {
        if self.step == 0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        self.step += 1;
        let m = self.step as f64;
        let eta = 1.0 / (m + DA_T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept_stat);
        self.log_eps = self.mu - m.sqrt() / DA_GAMMA * self.h_bar;
        let weight = m.powf(-DA_KAPPA);
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar;
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
pub(crate) struct RunningVariance {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Regularized sample variance pulled toward a small diagonal, as in
    /// Stan's windowed adaptation.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|&m2| {
                let var = if self.n > 1 { m2 / (n - 1.0) } else { 1.0 };
                let shrunk = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                shrunk.max(1e-10)
            })
            .collect()
    }
}

/// Mass-matrix update points within warmup: expanding windows preceded by a
/// step-size-only init buffer and followed by a step-size-only term buffer.
///
/// The term buffer takes 30% of warmup: dual averaging restarts after the
/// last metric update and its iterates need a few hundred steps to settle on
/// stiff posteriors.
///
/// Short warmups (< 150 steps) adapt the step size only.
pub(crate) fn mass_update_schedule(warmup: usize) -> Vec<(usize, usize)> {
    const INIT_BUFFER: usize = 75;
    const FIRST_WINDOW: usize = 25;
    let term_buffer = (3 * warmup) / 10;
    if warmup < INIT_BUFFER + 50 + FIRST_WINDOW {
        return Vec::new();
    }
    let adapt_end = warmup - term_buffer.max(50);
    let mut windows = Vec::new();
    let mut start = INIT_BUFFER;
    let mut size = FIRST_WINDOW;
    loop {
        // The final window absorbs whatever would be left over.
        if start + 3 * size > adapt_end {
            windows.push((start, adapt_end));
            break;
        }
        windows.push((start, start + size));
        start += size;
        size *= 2;
    }
    windows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_expected_windows() {
        let w = mass_update_schedule(1024);
        assert_eq!(w, vec![(75, 100), (100, 150), (150, 250), (250, 717)]);
        assert!(mass_update_schedule(100).is_empty());
    }

    #[test]
    fn running_variance_matches_direct_computation() {
        let samples = [[1.0, -2.0], [0.5, 0.0], [2.5, 1.0], [-1.0, 3.0]];
        let mut rv = RunningVariance::new(2);
        for s in &samples {
            rv.add(s);
        }
        let n = samples.len() as f64;
        for dim in 0..2 {
            let mean: f64 = samples.iter().map(|s| s[dim]).sum::<f64>() / n;
            let var: f64 =
                samples.iter().map(|s| (s[dim] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expected = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            assert!((rv.regularized_variance()[dim] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        // Acceptance permanently above target -> step size grows.
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..100 {
            da.update(1.0);
        }
        assert!(da.current() > 1.0);
        // Permanently below target -> shrinks.
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..100 {
            da.update(0.0);
        }
        assert!(da.current() < 1.0);
    }
}
