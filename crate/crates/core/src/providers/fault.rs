use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fault and timing behaviour of the simulated cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    pub seed: u64,
    pub acquire_failure_prob: f64,
    /// Applies to every blocking command and file sync during provisioning.
    pub provision_failure_prob: f64,
    /// Probability that the benchmark run reports a failure.
    pub run_failure_prob: f64,
    pub release_failure_prob: f64,
    pub postprocess_failure_prob: f64,
    /// Probability that the agent dies silently during the run.
    pub hang_prob: f64,
    pub acquire_latency: LatencySpec,
    pub run_duration_secs: u64,
    pub command_timeout_secs: u64,
    pub ready_timeout_secs: u64,
    /// Maximum simultaneously held VMs; 0 means unlimited.
    pub max_vms: usize,
    pub max_payload_bytes: usize,
    pub synthetic_bandwidth: BandwidthSpec,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            acquire_failure_prob: 0.0,
            provision_failure_prob: 0.0,
            run_failure_prob: 0.0,
            release_failure_prob: 0.0,
            postprocess_failure_prob: 0.0,
            hang_prob: 0.0,
            acquire_latency: LatencySpec { min_secs: 3, max_secs: 3 },
            run_duration_secs: 120,
            command_timeout_secs: 600,
            ready_timeout_secs: 900,
            max_vms: 0,
            max_payload_bytes: 1 << 30,
            synthetic_bandwidth: BandwidthSpec::default(),
        }
    }
}

impl FaultPlan {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("acquire_failure_prob", self.acquire_failure_prob),
            ("provision_failure_prob", self.provision_failure_prob),
            ("run_failure_prob", self.run_failure_prob),
            ("release_failure_prob", self.release_failure_prob),
            ("postprocess_failure_prob", self.postprocess_failure_prob),
            ("hang_prob", self.hang_prob),
            ("synthetic_bandwidth.drop_prob", self.synthetic_bandwidth.drop_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.acquire_latency.min_secs > self.acquire_latency.max_secs {
            return Err("acquire_latency.min_secs exceeds max_secs".into());
        }
        let bw = &self.synthetic_bandwidth;
        if bw.mean_kbps <= 0.0 || bw.interval_ms == 0 {
            return Err("synthetic_bandwidth needs a positive mean and interval".into());
        }
        if !(0.0..1.0).contains(&bw.oscillation_amplitude) || !(0.0..1.0).contains(&bw.noise) {
            return Err("synthetic_bandwidth amplitude and noise must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&bw.drop_factor) || bw.drop_factor == 0.0 {
            return Err("synthetic_bandwidth.drop_factor must be in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub min_secs: u64,
    pub max_secs: u64,
}

impl LatencySpec {
    pub fn fixed(secs: u64) -> Self {
        Self { min_secs: secs, max_secs: secs }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.min_secs >= self.max_secs {
            self.min_secs
        } else {
            rng.gen_range(self.min_secs..=self.max_secs)
        }
    }
}

/// Shape of the synthetic bandwidth trace: a sine oscillation around the
/// mean with uniform noise and occasional sudden drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthSpec {
    pub mean_kbps: f64,
    /// Relative amplitude of the oscillation, in [0, 1).
    pub oscillation_amplitude: f64,
    /// Oscillation period in samples.
    pub oscillation_period: u32,
    /// Relative uniform noise, in [0, 1).
    pub noise: f64,
    pub drop_prob: f64,
    /// A dropped sample is scaled by this factor.
    pub drop_factor: f64,
    pub interval_ms: u64,
}

impl Default for BandwidthSpec {
    fn default() -> Self {
        Self {
            mean_kbps: 3500.0,
            oscillation_amplitude: 0.2,
            oscillation_period: 40,
            noise: 0.1,
            drop_prob: 0.02,
            drop_factor: 0.25,
            interval_ms: 500,
        }
    }
}

/// Generated trace with the indices of dropped samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    pub samples_kbps: Vec<f64>,
    pub drops: usize,
}

impl BandwidthSpec {
    /// Generates `n` samples. The baseline is scaled so that the expected
    /// value over whole periods, drops included, equals `mean_kbps`.
    pub fn generate(&self, rng: &mut ChaCha8Rng, n: usize) -> BandwidthTrace {
        let expected_drop_loss = self.drop_prob * (1.0 - self.drop_factor);
        let base = self.mean_kbps / (1.0 - expected_drop_loss);
        let period = f64::from(self.oscillation_period.max(1));
        let mut samples = Vec::with_capacity(n);
        let mut drops = 0;
        for i in 0..n {
            let phase = 2.0 * std::f64::consts::PI * (i as f64) / period;
            let noise = if self.noise > 0.0 {
                rng.gen_range(-self.noise..self.noise)
            } else {
                0.0
            };
            let mut v = base * (1.0 + self.oscillation_amplitude * phase.sin() + noise);
            if rng.gen_bool(self.drop_prob) {
                v *= self.drop_factor;
                drops += 1;
            }
            samples.push(v.max(1.0));
        }
        BandwidthTrace {
            samples_kbps: samples,
            drops,
        }
    }
}
