//! Bit accounting per transmitted image: pure arithmetic over the number of
//! transmitted real values, with ratio reports against reference schemes.

use serde::{Deserialize, Serialize};

/// Real-value counts per image and the bit width per value. The default is
/// the reference preset whose task payload is 4608 reals, subtask side
/// information 144 reals, at 32 bits each, against a JPEG2000 baseline of
/// 884,000 bits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitsConfig {
    pub task_reals: u64,
    pub subtask_reals: u64,
    pub bits_per_value: u64,
    pub jpeg2000_bits: u64,
}

impl Default for BitsConfig {
    fn default() -> Self {
        BitsConfig {
            task_reals: 4608,
            subtask_reals: 144,
            bits_per_value: 32,
            jpeg2000_bits: 884_000,
        }
    }
}

impl BitsConfig {
    /// Counts for this build's architecture: `2k` task reals and `2k_c`
    /// subtask reals per image at 32 bits per value.
    pub fn from_arch(arch: &crate::models::ArchConfig) -> Self {
        BitsConfig {
            task_reals: 2 * arch.k as u64,
            subtask_reals: 2 * arch.k_c as u64,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitsReport {
    /// Conditioned scheme: task plus subtask side information.
    pub with_subtask: u64,
    /// Task-only reference (unconditioned JSCC / VAE).
    pub without_subtask: u64,
    pub jpeg2000: u64,
    /// Subtask side-information bits over the task-only reference.
    pub overhead_ratio: f64,
    /// Saving of the conditioned scheme against JPEG2000.
    pub reduction_ratio: f64,
}

impl BitsReport {
    /// Whole-percent rendering of the overhead, e.g. "3%".
    pub fn overhead_report(&self) -> String {
        format!("{}%", (self.overhead_ratio * 100.0).round() as i64)
    }

    /// Whole-percent rendering of the reduction, e.g. "83%".
    pub fn reduction_report(&self) -> String {
        format!("{}%", (self.reduction_ratio * 100.0).round() as i64)
    }
}

/// Bits per transmitted image for each scheme plus the ratio reports.
pub fn bits_accounting(cfg: &BitsConfig) -> BitsReport {
    let with_subtask = (cfg.task_reals + cfg.subtask_reals) * cfg.bits_per_value;
    let without_subtask = cfg.task_reals * cfg.bits_per_value;
    let overhead = (cfg.subtask_reals * cfg.bits_per_value) as f64 / without_subtask as f64;
    let reduction = 1.0 - with_subtask as f64 / cfg.jpeg2000_bits as f64;
    BitsReport {
        with_subtask,
        without_subtask,
        jpeg2000: cfg.jpeg2000_bits,
        overhead_ratio: overhead,
        reduction_ratio: reduction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_preset_exact_numbers() {
        let r = bits_accounting(&BitsConfig::default());
        assert_eq!(r.with_subtask, 152_064);
        assert_eq!(r.without_subtask, 147_456);
        assert_eq!(r.jpeg2000, 884_000);
    }

    #[test]
    fn ratio_reports_round_to_headline_percentages() {
        let r = bits_accounting(&BitsConfig::default());
        assert!((r.overhead_ratio - 0.03125).abs() < 1e-12);
        assert_eq!(r.overhead_report(), "3%");
        assert!((r.reduction_ratio - (1.0 - 152_064.0 / 884_000.0)).abs() < 1e-12);
        assert_eq!(r.reduction_report(), "83%");
    }

    #[test]
    fn arch_counts() {
        let arch = crate::models::ArchConfig::default();
        let cfg = BitsConfig::from_arch(&arch);
        assert_eq!(cfg.task_reals, 64);
        assert_eq!(cfg.subtask_reals, 16);
        let r = bits_accounting(&cfg);
        assert_eq!(r.with_subtask, 80 * 32);
    }
}
