use std::fmt::Write as _;

/// One logged scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub stage: String,
    pub loss_name: String,
    pub value: f64,
}

/// Per-step training metrics, written as CSV `step,stage,loss_name,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

/// Smoothing factor of [`MetricsLog::smoothed`].
pub const SMOOTHING: f64 = 0.9;

impl MetricsLog {
    pub fn push(&mut self, step: usize, stage: &str, loss_name: &str, value: f64) {
        self.rows.push(MetricRow { step, stage: stage.to_string(), loss_name: loss_name.to_string(), value });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    /// Values of one series in step order.
    pub fn series(&self, stage: &str, loss_name: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage && r.loss_name == loss_name).map(|r| r.value).collect()
    }

    /// Exponential moving average `s_t = a·s_{t−1} + (1−a)·x_t`, `s_0 = x_0`.
    pub fn smoothed(&self, stage: &str, loss_name: &str) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for x in self.series(stage, loss_name) {
            let s = out.last().map_or(x, |p| SMOOTHING * p + (1.0 - SMOOTHING) * x);
            out.push(s);
        }
        out
    }

    /// Smoothed loss at the last step is below its value at step 10 (step 0
    /// for runs of at most 11 steps). Runs shorter than two steps pass.
    pub fn loss_decreased(&self, stage: &str, loss_name: &str) -> bool {
        let s = self.smoothed(stage, loss_name);
        if s.len() < 2 {
            return true;
        }
        let early = if s.len() > 11 { s[10] } else { s[0] };
        s[s.len() - 1] < early
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,loss_name,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?}", r.step, r.stage, r.loss_name, r.value);
        }
        s
    }
}
