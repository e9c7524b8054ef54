use super::TrainConfig;

/// Polynomial decay: `base_lr · (1 − iter/total)^power`.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> f64 {
    if total_iters == 0 {
        return cfg.base_lr;
    }
    let progress = (iter.min(total_iters) as f64) / total_iters as f64;
    cfg.base_lr * (1.0 - progress).powf(cfg.lr_power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 5e-3);
        let last = lr_at(999, 1000, &cfg);
        assert!(last > 0.0 && last < 5e-3 * 0.01);
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let lr = lr_at(i, 1000, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
        let linear = TrainConfig {
            lr_power: 1.0,
            ..TrainConfig::default()
        };
        assert!((lr_at(500, 1000, &linear) - 2.5e-3).abs() < 1e-15);
    }
}
