//! Vision side: patch-embedding transformer tower and the compact
//! depthwise-separable CNN tower, plus the bridge projection into the
//! fusion width.

use rand::Rng;

use crate::autodiff::{conv_out_dim, Tape, VarId};
use crate::config::{VisionCnnConfig, VisionPatchConfig};
use crate::error::{EssenError, Result};
use crate::layers::{BlockParams, LinearParams, INIT_STD};
use crate::params::{ParamId, ParamStore, StoreBinding};
use crate::tensor::{Scalar, Tensor};

/// Square RGB image, channels-first, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    size: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * size * size {
            return Err(EssenError::ShapeMismatch {
                context: "ImageTensor::new".into(),
                expected: format!("{} pixel values", 3 * size * size),
                got: pixels.len().to_string(),
            });
        }
        Ok(Self { size, pixels })
    }

    pub fn white(size: usize) -> Self {
        Self {
            size,
            pixels: vec![1.0; 3 * size * size],
        }
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; 3 * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.size + y) * self.size + x] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .pixels
            .iter()
            .any(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(EssenError::ShapeMismatch {
                context: "ImageTensor".into(),
                expected: "finite pixels in [0,1]".into(),
                got: "out-of-range or non-finite value".into(),
            });
        }
        Ok(())
    }

    /// (h*w, 3) channels-last matrix, the layout the conv ops consume.
    pub fn to_hw3<T: Scalar>(&self) -> Tensor<T> {
        let s = self.size;
        let mut out = Tensor::zeros(s * s, 3);
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    out.set(y * s + x, c, T::from_f64(self.get(c, y, x) as f64));
                }
            }
        }
        out
    }
}

/// Non-overlapping patches in row-major order, each flattened to
/// 3*patch*patch values ordered (channel, y, x).
pub fn patchify<T: Scalar>(img: &ImageTensor, patch_size: usize) -> Result<Tensor<T>> {
    if patch_size == 0 || img.size % patch_size != 0 {
        return Err(EssenError::ShapeMismatch {
            context: "patchify".into(),
            expected: format!("image size divisible by patch size {patch_size}"),
            got: img.size.to_string(),
        });
    }
    let n = img.size / patch_size;
    let dim = 3 * patch_size * patch_size;
    let mut out = Tensor::zeros(n * n, dim);
    for py in 0..n {
        for px in 0..n {
            let row = out.row_mut(py * n + px);
            let mut i = 0;
            for c in 0..3 {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        row[i] =
                            T::from_f64(img.get(c, py * patch_size + y, px * patch_size + x) as f64);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify`, used by the round-trip test.
pub fn unpatchify(patches: &Tensor<f32>, image_size: usize, patch_size: usize) -> ImageTensor {
    let n = image_size / patch_size;
    assert_eq!(patches.rows(), n * n);
    let mut img = ImageTensor::zeros(image_size);
    for py in 0..n {
        for px in 0..n {
            let row = patches.row(py * n + px);
            let mut i = 0;
            for c in 0..3 {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        img.set(c, py * patch_size + y, px * patch_size + x, row[i]);
                        i += 1;
                    }
                }
            }
        }
    }
    img
}

/// Bridge from a tower's output width into the fusion width; parameter-free
/// identity when the widths already match.
#[derive(Debug, Clone)]
pub enum Projection {
    Identity,
    Affine(LinearParams),
}

impl Projection {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        from: usize,
        to: usize,
    ) -> Self {
        if from == to {
            Projection::Identity
        } else {
            Projection::Affine(LinearParams::add(store, prefix, rng, from, to))
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: StoreBinding, x: VarId) -> VarId {
        match self {
            Projection::Identity => x,
            Projection::Affine(lin) => lin.forward(tape, bind, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchTowerParams {
    pub proj: LinearParams,
    pub cls: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchTowerParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        cfg: &VisionPatchConfig,
    ) -> Self {
        let n = (cfg.image_size / cfg.patch_size) * (cfg.image_size / cfg.patch_size);
        let proj = LinearParams::add(
            store,
            &format!("{prefix}.patch"),
            rng,
            3 * cfg.patch_size * cfg.patch_size,
            cfg.hidden,
        );
        let cls = store.add(
            format!("{prefix}.cls"),
            Tensor::trunc_normal(1, cfg.hidden, INIT_STD, rng),
        );
        let pos_emb = store.add(
            format!("{prefix}.pos_emb"),
            Tensor::trunc_normal(n + 1, cfg.hidden, INIT_STD, rng),
        );
        let blocks = (0..cfg.layers)
            .map(|i| {
                BlockParams::add(
                    store,
                    &format!("{prefix}.layer{i}"),
                    rng,
                    cfg.hidden,
                    cfg.ffn,
                    cfg.heads,
                )
            })
            .collect();
        Self {
            proj,
            cls,
            pos_emb,
            blocks,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        }
    }

    /// Linear patch projection, prepended image-CLS, position embeddings,
    /// then the block stack. Output: ((image/patch)^2 + 1, hidden).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        img: &ImageTensor,
    ) -> Result<VarId> {
        img.validate()?;
        let patches = patchify::<T>(img, self.patch_size)?;
        let n = patches.rows();
        let pleaf = tape.leaf(patches);
        let projected = self.proj.forward(tape, bind, pleaf);
        let with_cls = tape.concat_rows(vec![bind.var(self.cls), projected]);
        let pos = tape.slice_rows(bind.var(self.pos_emb), 0, n + 1);
        let mut x = tape.add(with_cls, pos);
        for block in &self.blocks {
            x = block.forward(tape, bind, x, x, None);
        }
        Ok(x)
    }

    /// Patch-embedding front-end only (no CLS, no encoder blocks); the
    /// one-tower path embeds patches straight into the joint width.
    pub fn embed_only<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        img: &ImageTensor,
    ) -> Result<VarId> {
        img.validate()?;
        let patches = patchify::<T>(img, self.patch_size)?;
        let pleaf = tape.leaf(patches);
        Ok(self.proj.forward(tape, bind, pleaf))
    }
}

#[derive(Debug, Clone)]
struct DwBlock {
    dw_w: ParamId,
    dw_b: ParamId,
    pw: LinearParams,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct CnnTowerParams {
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<DwBlock>,
    pub out_proj: LinearParams,
    pub image_size: usize,
    pub stages: usize,
}

impl CnnTowerParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        cfg: &VisionCnnConfig,
    ) -> Self {
        let c0 = cfg.stage_channels[0];
        let stem_w = store.add(
            format!("{prefix}.stem.w"),
            Tensor::trunc_normal(c0, 3 * 9, INIT_STD, rng),
        );
        let stem_b = store.add(format!("{prefix}.stem.b"), Tensor::zeros(1, c0));
        let mut blocks = Vec::new();
        let mut in_ch = c0;
        for (s, &out_ch) in cfg.stage_channels.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let cin = if b == 0 { in_ch } else { out_ch };
                let stride = if b == 0 { 2 } else { 1 };
                let dw_w = store.add(
                    format!("{prefix}.stage{s}.block{b}.dw.w"),
                    Tensor::trunc_normal(cin, 9, INIT_STD, rng),
                );
                let dw_b = store.add(
                    format!("{prefix}.stage{s}.block{b}.dw.b"),
                    Tensor::zeros(1, cin),
                );
                let pw = LinearParams::add(
                    store,
                    &format!("{prefix}.stage{s}.block{b}.pw"),
                    rng,
                    cin,
                    out_ch,
                );
                blocks.push(DwBlock {
                    dw_w,
                    dw_b,
                    pw,
                    stride,
                });
            }
            in_ch = out_ch;
        }
        let last = *cfg.stage_channels.last().unwrap();
        let out_proj = LinearParams::add(store, &format!("{prefix}.out_proj"), rng, last, cfg.out_proj);
        Self {
            stem_w,
            stem_b,
            blocks,
            out_proj,
            image_size: cfg.image_size,
            stages: cfg.stage_channels.len(),
        }
    }

    /// Stem conv, then per stage depthwise->pointwise->GELU blocks (first
    /// block of each stage stride 2), spatially flattened and projected.
    /// Output: ((image / 2^stages)^2, out_proj).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        img: &ImageTensor,
    ) -> Result<VarId> {
        img.validate()?;
        if img.size() != self.image_size || img.size() % (1 << self.stages) != 0 {
            return Err(EssenError::ShapeMismatch {
                context: "encode_image_cnn".into(),
                expected: format!(
                    "image size {} divisible by 2^{}",
                    self.image_size, self.stages
                ),
                got: img.size().to_string(),
            });
        }
        let mut h = img.size();
        let mut w = img.size();
        let input = tape.leaf(img.to_hw3::<T>());
        let stem = tape.conv3x3(input, bind.var(self.stem_w), bind.var(self.stem_b), h, w, 1);
        let mut x = tape.gelu(stem);
        for block in &self.blocks {
            let dw = tape.dwconv3x3(
                x,
                bind.var(block.dw_w),
                bind.var(block.dw_b),
                h,
                w,
                block.stride,
            );
            h = conv_out_dim(h, block.stride);
            w = conv_out_dim(w, block.stride);
            let pw = block.pw.forward(tape, bind, dw);
            x = tape.gelu(pw);
        }
        Ok(self.out_proj.forward(tape, bind, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker_image(size: usize) -> ImageTensor {
        let mut img = ImageTensor::white(size);
        for y in 0..size {
            for x in 0..size {
                if (x + y) % 2 == 0 {
                    img.set(0, y, x, 0.25);
                    img.set(1, y, x, 0.5);
                    img.set(2, y, x, 0.75);
                }
            }
        }
        img
    }

    #[test]
    fn patchify_counts() {
        let img = checker_image(32);
        assert_eq!(patchify::<f32>(&img, 8).unwrap().rows(), 16);
        // identity partition: one patch equals the flattened image
        let single = patchify::<f32>(&img, 32).unwrap();
        assert_eq!(single.rows(), 1);
        assert_eq!(single.cols(), 3 * 32 * 32);
    }

    #[test]
    fn patchify_roundtrip_bit_exact() {
        let img = checker_image(24);
        let patches = patchify::<f32>(&img, 8).unwrap();
        let back = unpatchify(&patches, 24, 8);
        assert_eq!(back, img);
    }

    #[test]
    fn patchify_rejects_bad_divisibility() {
        let img = checker_image(30);
        assert!(patchify::<f32>(&img, 8).is_err());
    }

    #[test]
    fn patch_tower_token_count_and_determinism() {
        let cfg = VisionPatchConfig {
            image_size: 16,
            patch_size: 8,
            hidden: 24,
            layers: 1,
            heads: 4,
            ffn: 96,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let tower = PatchTowerParams::add(&mut store, "vision_tower", &mut rng, &cfg);
        let img = checker_image(16);

        let run = |img: &ImageTensor| {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &store);
            let out = tower.forward(&mut tape, b, img).unwrap();
            tape.value(out).clone()
        };
        let a = run(&img);
        assert_eq!(a.shape(), (4 + 1, 24));
        assert_eq!(a, run(&img));
        assert!(a.is_finite());

        // nonzero projection weights: a one-pixel change must show up
        let mut img2 = img.clone();
        img2.set(0, 3, 3, 1.0 - img2.get(0, 3, 3));
        assert_ne!(a, run(&img2));
    }

    #[test]
    fn cnn_token_count_and_zero_image() {
        let cfg = VisionCnnConfig {
            image_size: 16,
            stage_channels: vec![6, 12],
            blocks_per_stage: 2,
            out_proj: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let tower = CnnTowerParams::add(&mut store, "vision_tower", &mut rng, &cfg);

        let mut tape = Tape::new();
        let b = bind(&mut tape, &store);
        let out = tower.forward(&mut tape, b, &ImageTensor::zeros(16)).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), (16, 20)); // (16/2^2)^2 tokens
        // zero image, zero biases: every conv and GELU preserves zero
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cnn_single_bright_pixel_tracks_spatial_flattening() {
        let cfg = VisionCnnConfig {
            image_size: 32,
            stage_channels: vec![6, 12],
            blocks_per_stage: 1,
            out_proj: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let tower = CnnTowerParams::add(&mut store, "vision_tower", &mut rng, &cfg);

        let respond = |py: usize, px: usize| -> usize {
            let mut img = ImageTensor::zeros(32);
            img.set(0, py, px, 1.0);
            img.set(1, py, px, 1.0);
            img.set(2, py, px, 1.0);
            let mut tape = Tape::new();
            let b = bind(&mut tape, &store);
            let out = tower.forward(&mut tape, b, &img).unwrap();
            let v = tape.value(out);
            (0..v.rows())
                .max_by(|&a, &b| {
                    let na: f32 = v.row(a).iter().map(|x| x.abs()).sum();
                    let nb: f32 = v.row(b).iter().map(|x| x.abs()).sum();
                    na.partial_cmp(&nb).unwrap()
                })
                .unwrap()
        };
        // 32 -> 8 tokens per side after two stride-2 stages. Shifting an
        // interior bright pixel by one stage-stride (4 px) moves the
        // responding token by exactly one grid step under row-major
        // flattening (conv translation equivariance away from borders).
        let base = respond(13, 13);
        assert_eq!(respond(13, 17), base + 1);
        assert_eq!(respond(17, 13), base + 8);
        assert_eq!(respond(17, 17), base + 9);
    }

    #[test]
    fn projection_identity_when_widths_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let proj = Projection::add(&mut store, "p", &mut rng, 8, 8);
        assert!(matches!(proj, Projection::Identity));
        assert_eq!(store.len(), 0);

        let mut tape = Tape::new();
        let b = bind(&mut tape, &store);
        let x = tape.leaf(Tensor::from_vec(2, 8, (0..16).map(|i| i as f32).collect()));
        let y = proj.forward(&mut tape, b, x);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn projection_reshapes_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f32>::new();
        let proj = Projection::add(&mut store, "p", &mut rng, 12, 5);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &store);
        let x = tape.leaf(Tensor::zeros(7, 12));
        let y = proj.forward(&mut tape, b, x);
        assert_eq!(tape.value(y).shape(), (7, 5));
        // zero tokens through zero bias stay zero
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
