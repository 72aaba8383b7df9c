use essen_core::harness::grad_check_from_config;
use essen_core::presets::preset;

fn main() {
    for name in ["grad-tiny-two-tower", "grad-tiny-one-tower"] {
        for seed in [5u64, 7, 17, 42] {
            let cfg = preset(name).unwrap();
            let rep = grad_check_from_config(&cfg, seed, 200, 1e-5).unwrap();
            println!("{name} seed {seed}: max_rel_err {:.3e} ({} params)", rep.max_rel_err, rep.total_params);
        }
    }
}
