use essen_core::autodiff::Tape;
use essen_core::data::{gen_scene, render_ppm, gen_caption};
use essen_core::harness::ingest_image;
use essen_core::model::VlModel;
use essen_core::params::bind;
use essen_core::presets::preset;
use essen_core::pretrain::*;
use essen_core::text::{tokenize, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let seed = 17u64;
    let cfg = preset("grad-tiny-two-tower").unwrap();
    let vocab = Vocabulary::base();
    let image_size = cfg.vision.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in 0..6u64 {
        let scene = gen_scene(seed.wrapping_add(i * 7919), 32, (2, 4)).unwrap();
        let caption = gen_caption(&scene, &mut rng);
        let (img, _) = render_ppm(&scene).unwrap();
        pairs.push((tokenize(&caption, &vocab, cfg.text.max_len), ingest_image(img, image_size).unwrap()));
    }
    let mut batch = sample_itm_pairs(&pairs, 0.5, &mut rng).unwrap();
    mask_batch(&mut batch, &MaskingPolicy { ratio: 0.35, ..Default::default() }, vocab.len(), &mut rng);

    let mut model = VlModel::<f64>::new(cfg.clone()).unwrap();
    let mut hrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut heads = Heads::<f64>::new_random(HeadKind::Pretrain, model.fused_width, cfg.text.vocab_size, &mut hrng);
    let scale = |st: &mut essen_core::params::ParamStore<f64>| {
        for p in st.entries_mut() {
            let skip = p.value.data().iter().all(|&x| x == 0.0) || p.value.data().iter().all(|&x| x == 1.0);
            if !skip { p.value.scale_assign(22.0); }
        }
    };
    scale(&mut model.store);
    scale(&mut heads.store);

    let loss_fn = |model: &VlModel<f64>, heads: &Heads<f64>| -> (f64, Vec<Option<essen_core::Tensor<f64>>>) {
        let n = batch.items.len();
        let n_mlm = batch.items.iter().filter(|i| !i.mlm_targets.is_empty()).count();
        let w_mlm = if n_mlm > 0 { 1.0 / n_mlm as f64 } else { 0.0 };
        let w_itm = 1.0 / n as f64;
        let mut tape = Tape::new();
        let mb = bind(&mut tape, &model.store);
        let hb = bind(&mut tape, &heads.store);
        let mut parts = Vec::new();
        for item in &batch.items {
            let (c, _, _) = example_loss(&mut tape, model, mb, heads, hb, item, w_mlm, w_itm).unwrap();
            parts.push((c, 1.0));
        }
        let t = tape.add_scaled(parts);
        let v = tape.value(t).item();
        let g = tape.backward(t);
        (v, g)
    };
    let (loss0, grads) = loss_fn(&model, &heads);
    println!("loss at check point: {loss0}");
    let n_model = model.store.len();
    let total: u64 = model.store.total_scalars() + heads.store.total_scalars();
    let mut srng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    // skip the rng draws new_random consumed? grad_check uses a fresh continuation; emulate grad_check exactly: it uses the same rng continuing after heads init
    let mut worst: Vec<(f64, String, usize, f64, f64)> = Vec::new();
    let _ = &mut srng;
    let mut hrng2 = hrng.clone();
    for _ in 0..200 {
        let flat = hrng2.gen_range(0..total) as usize;
        let mut rem = flat; let mut loc = None;
        for (i, p) in model.store.entries().iter().enumerate() {
            if rem < p.value.len() { loc = Some((true, i, rem)); break; }
            rem -= p.value.len();
        }
        if loc.is_none() {
            for (i, p) in heads.store.entries().iter().enumerate() {
                if rem < p.value.len() { loc = Some((false, i, rem)); break; }
                rem -= p.value.len();
            }
        }
        let (is_m, idx, off) = loc.unwrap();
        let analytic = { let var = if is_m { idx } else { n_model + idx }; grads[var].as_ref().map_or(0.0, |g| g.data()[off]) };
        let name = if is_m { model.store.entries()[idx].name.clone() } else { heads.store.entries()[idx].name.clone() };
        let eps = 1e-5;
        let mut at = |d: f64, model: &mut VlModel<f64>, heads: &mut Heads<f64>| -> f64 {
            { let st = if is_m { &mut model.store } else { &mut heads.store }; st.entries_mut()[idx].value.data_mut()[off] += d; }
            let v = loss_fn(model, heads).0;
            { let st = if is_m { &mut model.store } else { &mut heads.store }; st.entries_mut()[idx].value.data_mut()[off] -= d; }
            v
        };
        let p = at(eps, &mut model, &mut heads);
        let m = at(-eps, &mut model, &mut heads);
        let numeric = (p - m) / (2.0 * eps);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst.push((rel, name, off, analytic, numeric));
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (rel, name, off, a, n) in worst.iter().take(6) {
        println!("rel {rel:.3e}  {name}[{off}]  analytic {a:.6e}  numeric {n:.6e}");
    }
}
