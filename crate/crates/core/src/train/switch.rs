//! When to leave phase 1: the monitored distance has stopped improving
//! by more than a relative threshold for `patience` evaluations.

/// Incremental form of [`phase_switch_criterion`], stored in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwitchMonitor {
    pub history: Vec<f64>,
    pub best: Option<f64>,
    /// Evaluations since the last significant improvement.
    pub stale: usize,
}

impl SwitchMonitor {
    /// Records one evaluation. The first one sets the baseline; later
    /// ones count as improvements only below `best * (1 - threshold)`.
    pub fn observe(&mut self, value: f64, threshold: f64) {
        self.history.push(value);
        match self.best {
            Some(best) if !(value < best * (1.0 - threshold)) => self.stale += 1,
            _ => {
                self.best = Some(value);
                self.stale = 0;
            }
        }
    }

    pub fn plateaued(&self, patience: usize) -> bool {
        self.history.len() >= patience && self.stale >= patience
    }
}

/// True once the metric history has plateaued for `patience`
/// evaluations, or `step` has reached `max_steps`.
pub fn phase_switch_criterion(history: &[f64], patience: usize, threshold: f64, step: u64, max_steps: u64) -> bool {
    if step >= max_steps {
        return true;
    }
    let mut m = SwitchMonitor::default();
    for &v in history {
        m.observe(v, threshold);
    }
    m.plateaued(patience)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_value_is_a_baseline() {
        let mut m = SwitchMonitor::default();
        m.observe(5.0, 0.01);
        assert_eq!((m.best, m.stale), (Some(5.0), 0));
        m.observe(4.99, 0.01);
        assert_eq!((m.best, m.stale), (Some(5.0), 1));
        m.observe(4.0, 0.01);
        assert_eq!((m.best, m.stale), (Some(4.0), 0));
    }

    #[test]
    fn nan_never_counts_as_improvement() {
        let mut m = SwitchMonitor::default();
        m.observe(1.0, 0.01);
        m.observe(f64::NAN, 0.01);
        assert_eq!(m.stale, 1);
    }
}
