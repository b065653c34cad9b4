//! The multi-task U-Net/ViT velocity network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use flexdiff_core::diffusion::{SampleShape, VelocityPredictor};
use flexdiff_core::{ConditioningContext, Error, Result, Task};

use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, Linear, Norm, ResBlock, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const FOURIER_FEATURES: usize = 64;
pub const CONTEXT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    Concat,
    Add,
}

pub const PRESETS: [&str; 5] = ["tiny", "desk", "small", "medium", "large"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexConfig {
    /// Side length the positional embedding is sized for.
    pub image_size: usize,
    pub in_channels: usize,
    pub enc_channels: Vec<usize>,
    pub enc_blocks: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub dec_blocks: Vec<usize>,
    pub vit_depth: usize,
    pub vit_heads: usize,
    /// Deepest level receiving weak conditioning; `None` disables it.
    pub l_weak: Option<usize>,
    pub tasks: Vec<Task>,
    pub dropout: f64,
    pub skip_fusion: SkipFusion,
    /// When false the conditioning snapshots are concatenated to the input instead.
    pub task_encoder: bool,
    pub emb_dim: usize,
}

impl FlexConfig {
    fn from_lists(
        image_size: usize,
        channels: &[usize],
        blocks: &[usize],
        depth: usize,
        heads: usize,
    ) -> Self {
        Self {
            image_size,
            in_channels: 1,
            enc_channels: channels.to_vec(),
            enc_blocks: blocks.to_vec(),
            dec_channels: channels.to_vec(),
            dec_blocks: blocks.to_vec(),
            vit_depth: depth,
            vit_heads: heads,
            l_weak: Some(1.min(channels.len() - 1)),
            tasks: vec![Task::SuperResolution, Task::Forecast],
            dropout: 0.1,
            skip_fusion: SkipFusion::Concat,
            task_encoder: true,
            emb_dim: 4 * channels[channels.len() - 1],
        }
    }

    pub fn tiny(image_size: usize) -> Self {
        Self::from_lists(image_size, &[8, 16], &[1, 1], 2, 2)
    }

    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk(image_size: usize) -> Self {
        Self::from_lists(image_size, &[32, 64, 64], &[1, 1, 1], 2, 4)
    }

    pub fn small(image_size: usize) -> Self {
        Self::from_lists(image_size, &[64, 128, 128, 256], &[2, 3, 3, 3], 13, 4)
    }

    pub fn medium(image_size: usize) -> Self {
        Self::from_lists(image_size, &[64, 128, 256, 512], &[2, 3, 3, 4], 13, 8)
    }

    pub fn large(image_size: usize) -> Self {
        Self::from_lists(image_size, &[128, 256, 512, 1152], &[2, 3, 3, 3], 21, 16)
    }

    pub fn preset(name: &str, image_size: usize) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::tiny(image_size),
            "desk" => Self::desk(image_size),
            "small" => Self::small(image_size),
            "medium" => Self::medium(image_size),
            "large" => Self::large(image_size),
            other => {
                return Err(Error::Parameter(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn with_tasks(mut self, tasks: &[Task]) -> Self {
        self.tasks = tasks.to_vec();
        self
    }

    /// Number of downsampling steps.
    pub fn levels(&self) -> usize {
        self.enc_channels.len().saturating_sub(1)
    }

    pub fn token_dim(&self) -> usize {
        *self.enc_channels.last().unwrap_or(&0)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        let n = self.enc_channels.len();
        if n == 0 {
            return bad("enc_channels is empty".into());
        }
        if [
            self.enc_blocks.len(),
            self.dec_channels.len(),
            self.dec_blocks.len(),
        ] != [n; 3]
        {
            return bad(
                "enc_channels, enc_blocks, dec_channels and dec_blocks must have equal length"
                    .into(),
            );
        }
        if self
            .enc_channels
            .iter()
            .chain(&self.dec_channels)
            .any(|&c| c == 0)
            || self.dec_blocks.iter().any(|&b| b == 0)
        {
            return bad("channel counts and decoder block counts must be positive".into());
        }
        let d = self.token_dim();
        if self.vit_heads == 0 || d % self.vit_heads != 0 {
            return bad(format!(
                "vit_heads = {} does not divide token dim {d}",
                self.vit_heads
            ));
        }
        if self.skip_fusion == SkipFusion::Add && self.dec_channels != self.enc_channels {
            return bad("additive skip fusion needs dec_channels equal to enc_channels".into());
        }
        if let Some(lw) = self.l_weak {
            if lw > self.levels() {
                return bad(format!(
                    "l_weak = {lw} exceeds the {} levels",
                    self.levels()
                ));
            }
        }
        if self.tasks.is_empty() {
            return bad("no tasks enabled".into());
        }
        if self.in_channels == 0 || self.emb_dim == 0 {
            return bad("in_channels and emb_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let div = 1usize << self.levels();
        if self.image_size == 0 || self.image_size % div != 0 {
            return bad(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.levels()
            ));
        }
        Ok(())
    }

    fn context_channels(task: Task) -> usize {
        task.snapshot_count()
    }

    /// Channels entering the shared encoder.
    pub fn input_channels(&self) -> usize {
        if self.task_encoder {
            self.in_channels
        } else {
            self.in_channels + 2
        }
    }
}

/// Inference-time ablations used by tests.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Levels whose task skip is zeroed on the decoder (strong) path.
    pub drop_strong: Vec<usize>,
    /// Levels whose task skip is zeroed on the encoder (weak) path.
    pub drop_weak: Vec<usize>,
    pub zero_cond_token: bool,
}

#[derive(Clone, Debug)]
struct EncLevel {
    down: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv2d,
    levels: Vec<EncLevel>,
}

impl Encoder {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cfg: &FlexConfig,
    ) -> Self {
        let ch = &cfg.enc_channels;
        let input = Conv2d::new(ps, rng, &format!("{name}.in"), cin, ch[0], 3, 1);
        let levels = (0..ch.len())
            .map(|l| EncLevel {
                down: (l > 0).then(|| {
                    Conv2d::new(
                        ps,
                        rng,
                        &format!("{name}.l{l}.down"),
                        ch[l - 1],
                        ch[l],
                        3,
                        2,
                    )
                }),
                blocks: (0..cfg.enc_blocks[l])
                    .map(|b| {
                        ResBlock::new(
                            ps,
                            rng,
                            &format!("{name}.l{l}.b{b}"),
                            ch[l],
                            ch[l],
                            cfg.emb_dim,
                            cfg.dropout,
                        )
                    })
                    .collect(),
            })
            .collect();
        Self { input, levels }
    }

    /// Runs every level; `inject` may modify a level's output before it is recorded.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        emb: Var,
        mut inject: impl FnMut(&mut Graph<T>, usize, Var) -> Var,
    ) -> Vec<Var> {
        let mut h = self.input.forward(g, ps, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, lev) in self.levels.iter().enumerate() {
            if let Some(d) = &lev.down {
                h = d.forward(g, ps, h);
            }
            for b in &lev.blocks {
                h = b.forward(g, ps, h, emb);
            }
            h = inject(g, l, h);
            skips.push(h);
        }
        skips
    }
}

#[derive(Clone, Debug)]
struct DecLevel {
    up: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Mlp2 {
    a: Linear,
    b: Linear,
}

impl Mlp2 {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        Self {
            a: Linear::new(ps, rng, &format!("{name}.0"), din, dout),
            b: Linear::new(ps, rng, &format!("{name}.1"), dout, dout),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.a.forward(g, ps, x);
        let h = g.silu(h);
        self.b.forward(g, ps, h)
    }
}

/// Network structure; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FlexNet {
    cfg: FlexConfig,
    task_enc: Vec<(Task, Encoder)>,
    ctx_mlp: Mlp2,
    shared: Encoder,
    time_mlp: Mlp2,
    token_mlp: Mlp2,
    pos: usize,
    vit: Vec<TransformerBlock>,
    dec: Vec<DecLevel>,
    out_norm: Norm,
    out_conv: Conv2d,
}

pub fn fourier_features(t: f64) -> [f64; FOURIER_FEATURES] {
    let half = FOURIER_FEATURES / 2;
    let mut out = [0.0; FOURIER_FEATURES];
    for k in 0..half {
        let f = (1000f64.ln() * k as f64 / (half - 1) as f64).exp();
        out[k] = (f * t).sin();
        out[half + k] = (f * t).cos();
    }
    out
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::SuperResolution => "sr",
        Task::Forecast => "fc",
    }
}

impl FlexNet {
    pub fn build<T: Real>(cfg: &FlexConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ps_ = &mut ps;
        let (e, d, nl) = (cfg.emb_dim, cfg.token_dim(), cfg.enc_channels.len());
        let task_enc = if cfg.task_encoder {
            [Task::SuperResolution, Task::Forecast]
                .into_iter()
                .filter(|t| cfg.tasks.contains(t))
                .map(|t| {
                    let cin = FlexConfig::context_channels(t);
                    (
                        t,
                        Encoder::new(ps_, rng, &format!("enc_{}", task_name(t)), cin, cfg),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let ctx_mlp = Mlp2::new(ps_, rng, "ctx_emb", CONTEXT_DIM, e);
        let shared = Encoder::new(ps_, rng, "enc_common", cfg.input_channels(), cfg);
        let time_mlp = Mlp2::new(ps_, rng, "time_emb", FOURIER_FEATURES + CONTEXT_DIM, e);
        let token_mlp = Mlp2::new(ps_, rng, "cond_token", FOURIER_FEATURES + CONTEXT_DIM, d);
        let nb = cfg.bottleneck_size();
        let pos = ps_.add_uniform("pos_emb", &[nb * nb, d], d, rng);
        let vit = (0..cfg.vit_depth)
            .map(|i| {
                TransformerBlock::new(ps_, rng, &format!("vit.{i}"), d, cfg.vit_heads, cfg.dropout)
            })
            .collect();
        let pieces = if cfg.task_encoder { 3 } else { 2 };
        let dec = (0..nl)
            .rev()
            .map(|l| {
                let c = cfg.enc_channels[l];
                let cin = match cfg.skip_fusion {
                    SkipFusion::Concat => pieces * c,
                    SkipFusion::Add => c,
                };
                let up = (l + 1 < nl).then(|| {
                    Conv2d::new(
                        ps_,
                        rng,
                        &format!("dec.l{l}.up"),
                        cfg.dec_channels[l + 1],
                        c,
                        3,
                        1,
                    )
                });
                let blocks = (0..cfg.dec_blocks[l])
                    .map(|b| {
                        let bin = if b == 0 {
                            cin
                        } else {
                            cfg.dec_channels[l] + cin - c
                        };
                        ResBlock::new(
                            ps_,
                            rng,
                            &format!("dec.l{l}.b{b}"),
                            bin,
                            cfg.dec_channels[l],
                            e,
                            cfg.dropout,
                        )
                    })
                    .collect();
                DecLevel { up, blocks }
            })
            .collect();
        let out_norm = Norm::group(ps_, "out.norm", cfg.dec_channels[0]);
        let out_conv = Conv2d::new(
            ps_,
            rng,
            "out.conv",
            cfg.dec_channels[0],
            cfg.in_channels,
            3,
            1,
        );
        let net = Self {
            cfg: cfg.clone(),
            task_enc,
            ctx_mlp,
            shared,
            time_mlp,
            token_mlp,
            pos,
            vit,
            dec,
            out_norm,
            out_conv,
        };
        Ok((net, ps))
    }

    pub fn config(&self) -> &FlexConfig {
        &self.cfg
    }

    /// Bottleneck tokens plus the conditioning token.
    pub fn sequence_length(&self) -> usize {
        let b = self.cfg.bottleneck_size();
        b * b + 1
    }

    pub fn pos_embedding_id(&self) -> usize {
        self.pos
    }

    /// Parameter ids of the output convolution (weight, bias).
    pub fn output_ids(&self) -> [usize; 2] {
        self.out_conv.weight_ids()
    }

    fn check_inputs<T: Real>(
        &self,
        t: &[f64],
        z: &Tensor<T>,
        ctxs: &[&ConditioningContext],
    ) -> Result<(usize, usize, usize)> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "z must be [batch, {}, H, W], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        if b == 0 || t.len() != b || ctxs.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} with {} times and {} contexts",
                t.len(),
                ctxs.len()
            )));
        }
        let div = 1usize << self.cfg.levels();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} not divisible by 2^{}",
                self.cfg.levels()
            )));
        }
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::Shape(format!(
                "positional embedding is sized for {0}x{0}, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("t = {bad} outside [0, 1]")));
        }
        let mut seen_fc = false;
        for c in ctxs {
            c.validate()?;
            if c.snapshots[0].nx != w || c.snapshots[0].ny != h {
                return Err(Error::Context(format!(
                    "context snapshot {}x{} does not match z {w}x{h}",
                    c.snapshots[0].nx, c.snapshots[0].ny
                )));
            }
            if !self.cfg.tasks.contains(&c.task) {
                return Err(Error::Parameter(format!(
                    "task {:?} is not enabled",
                    c.task
                )));
            }
            match c.task {
                Task::Forecast => seen_fc = true,
                Task::SuperResolution if seen_fc => {
                    return Err(Error::Consistency(
                        "batch layout: SR items must precede FC items".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok((b, h, w))
    }

    fn context_input<T: Real>(g: &mut Graph<T>, ctxs: &[&ConditioningContext]) -> Var {
        let v: Vec<f32> = ctxs.iter().flat_map(|c| c.context_vector()).collect();
        g.constant(Tensor::from_f32(&[ctxs.len(), CONTEXT_DIM], &v))
    }

    fn time_context_input<T: Real>(
        g: &mut Graph<T>,
        t: &[f64],
        ctxs: &[&ConditioningContext],
    ) -> Var {
        let mut v = Vec::with_capacity(t.len() * (FOURIER_FEATURES + CONTEXT_DIM));
        for (&t, c) in t.iter().zip(ctxs) {
            v.extend(fourier_features(t).iter().map(|&x| T::of(x)));
            v.extend(c.context_vector().iter().map(|&x| T::of(x as f64)));
        }
        g.constant(Tensor::new(
            vec![t.len(), FOURIER_FEATURES + CONTEXT_DIM],
            v,
        ))
    }

    /// Task encoder on a homogeneous partition: per-level skips (the last is `h_task`).
    pub fn encode_task<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        ctxs: &[&ConditioningContext],
    ) -> Result<Vec<Var>> {
        let task = ctxs
            .first()
            .ok_or_else(|| Error::Shape("empty partition".into()))?
            .task;
        let enc = self
            .task_enc
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Parameter(format!("no encoder for task {task:?}")))?;
        let mut data = Vec::new();
        for c in ctxs {
            c.validate()?;
            if c.task != task {
                return Err(Error::Consistency(
                    "mixed tasks in one encoder partition".into(),
                ));
            }
            data.extend_from_slice(&c.stacked_snapshots());
        }
        let f = &ctxs[0].snapshots[0];
        let x = g.constant(Tensor::from_f32(
            &[ctxs.len(), task.snapshot_count(), f.ny, f.nx],
            &data,
        ));
        let ce = Self::context_input(g, ctxs);
        let ce = self.ctx_mlp.forward(g, ps, ce);
        let ce = g.silu(ce);
        Ok(enc.forward(g, ps, x, ce, |_, _, h| h))
    }

    /// `v_hat` for a batch `z: [B, C, H, W]` whose contexts list SR items before FC items.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        t: &[f64],
        z: Tensor<T>,
        ctxs: &[&ConditioningContext],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let (b, h, w) = self.check_inputs(t, &z, ctxs)?;
        let cfg = &self.cfg;
        let nl = cfg.enc_channels.len();

        let task_skips: Option<Vec<Var>> = if cfg.task_encoder {
            let split = ctxs
                .iter()
                .take_while(|c| c.task == Task::SuperResolution)
                .count();
            let mut parts = Vec::new();
            if split > 0 {
                parts.push(self.encode_task(g, ps, &ctxs[..split])?);
            }
            if split < b {
                parts.push(self.encode_task(g, ps, &ctxs[split..])?);
            }
            Some(if parts.len() == 1 {
                parts.pop().unwrap()
            } else {
                (0..nl)
                    .map(|l| g.concat(&[parts[0][l], parts[1][l]], 0))
                    .collect()
            })
        } else {
            None
        };

        let z = g.constant(z);
        let x = if cfg.task_encoder {
            z
        } else {
            let mut extra = Vec::with_capacity(b * 2 * h * w);
            for c in ctxs {
                extra.extend_from_slice(&c.stacked_snapshots());
                if c.task == Task::SuperResolution {
                    extra.extend(std::iter::repeat_n(0.0, h * w));
                }
            }
            let extra = g.constant(Tensor::from_f32(&[b, 2, h, w], &extra));
            g.concat(&[z, extra], 1)
        };

        let tc = Self::time_context_input(g, t, ctxs);
        let emb = self.time_mlp.forward(g, ps, tc);
        let emb = g.silu(emb);

        let zero_like = |g: &mut Graph<T>, v: Var| {
            let s = g.shape(v).to_vec();
            g.constant(Tensor::zeros(&s))
        };
        let common =
            self.shared
                .forward(g, ps, x, emb, |g, l, act| match (&task_skips, cfg.l_weak) {
                    (Some(ts), Some(lw)) if l <= lw && !opts.drop_weak.contains(&l) => {
                        g.add(act, ts[l])
                    }
                    _ => act,
                });

        let mut hcur = common[nl - 1];
        if !self.vit.is_empty() {
            let d = cfg.token_dim();
            let (bh, bw) = (h >> cfg.levels(), w >> cfg.levels());
            let n = bh * bw;
            let tokens = g.reshape(hcur, &[b, d, n]);
            let tokens = g.permute(tokens, &[0, 2, 1]);
            let pos = g.param(ps, self.pos);
            let tokens = g.add(tokens, pos);
            let cond = if opts.zero_cond_token {
                g.constant(Tensor::zeros(&[b, d]))
            } else {
                self.token_mlp.forward(g, ps, tc)
            };
            let cond = g.reshape(cond, &[b, 1, d]);
            let mut seq = g.concat(&[cond, tokens], 1);
            for blk in &self.vit {
                seq = blk.forward(g, ps, seq);
            }
            let out = g.narrow(seq, 1, 1, n);
            let out = g.permute(out, &[0, 2, 1]);
            hcur = g.reshape(out, &[b, d, bh, bw]);
        }

        for (i, lev) in self.dec.iter().enumerate() {
            let l = nl - 1 - i;
            if let Some(up) = &lev.up {
                let u = g.upsample2x(hcur);
                hcur = up.forward(g, ps, u);
            }
            let mut skips = vec![common[l]];
            if let Some(ts) = &task_skips {
                skips.push(if opts.drop_strong.contains(&l) {
                    zero_like(g, ts[l])
                } else {
                    ts[l]
                });
            }
            for blk in &lev.blocks {
                let x = match cfg.skip_fusion {
                    SkipFusion::Concat => {
                        let parts: Vec<Var> =
                            std::iter::once(hcur).chain(skips.iter().copied()).collect();
                        g.concat(&parts, 1)
                    }
                    SkipFusion::Add => skips.iter().fold(hcur, |acc, &s| g.add(acc, s)),
                };
                hcur = blk.forward(g, ps, x, emb);
            }
        }
        let y = self.out_norm.forward(g, ps, hcur);
        let y = g.silu(y);
        Ok(self.out_conv.forward(g, ps, y))
    }

    /// Apply the transformer stack alone to `tokens: [B, T, d]`.
    pub fn vit_stack<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, tokens: Var) -> Var {
        let mut seq = tokens;
        for blk in &self.vit {
            seq = blk.forward(g, ps, seq);
        }
        seq
    }

    /// Inference forward on `f32` data for a single shared time.
    pub fn predict_batch(
        &self,
        ps: &ParamStore<f32>,
        t: &[f64],
        z: &[f32],
        ctxs: &[&ConditioningContext],
    ) -> Result<Vec<f32>> {
        let s = self.cfg.image_size;
        let shape = [ctxs.len(), self.cfg.in_channels, s, s];
        if z.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "z has {} values, expected {shape:?}",
                z.len()
            )));
        }
        let mut g = Graph::inference();
        let out = self.forward(
            &mut g,
            ps,
            t,
            Tensor::new(shape.to_vec(), z.to_vec()),
            ctxs,
            &ForwardOptions::default(),
        )?;
        Ok(g.value(out).data().to_vec())
    }
}

/// A trained network bound to one set of weights (normally the EMA copy).
#[derive(Clone, Debug)]
pub struct FlexPredictor {
    pub net: FlexNet,
    pub params: ParamStore<f32>,
}

impl VelocityPredictor for FlexPredictor {
    fn predict(
        &self,
        t: f64,
        z: &[f32],
        shape: SampleShape,
        context: &ConditioningContext,
    ) -> Result<Vec<f32>> {
        let cfg = self.net.config();
        if shape.channels != cfg.in_channels
            || shape.height != cfg.image_size
            || shape.width != cfg.image_size
        {
            return Err(Error::Shape(format!(
                "network expects {}x{}x{}, got {shape:?}",
                cfg.in_channels, cfg.image_size, cfg.image_size
            )));
        }
        self.net.predict_batch(&self.params, &[t], z, &[context])
    }
}
