//! Top-down ladder VAE whose priors are conditioned on a pseudoinput.
//!
//! Layers are indexed in processing order: layer 0 is the topmost (lowest
//! resolution) latent and the last layer sits at the highest-resolution
//! scale. Scales in [`ModelConfig::scales`] are listed the other way round,
//! from high to low resolution, matching the bottom-up pass.
//!
//! Random draws in [`LadderVae::forward_train`] happen in a fixed order:
//! pseudoinput noise, then one posterior draw per layer in processing
//! order, then the diffusion bound draws.

use crate::dct::{sample_pseudoinput, NormMatrix, PseudoinputTransform};
use crate::diffusion::{l_vlb, sample_prior, DiffusionSchedule, EpsNet, VlbMode};
use crate::distributions::{
    bernoulli_log_prob, gaussian_entropy_var, kl_diag_gaussian, rsample, BernoulliLikelihood,
    DiagGaussian,
};
use crate::error::{DvpError, Result};
use crate::nn::{Conv, ResBlock};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub channels: usize,
    /// `(side, layers)` from high to low resolution.
    pub scales: Vec<(usize, usize)>,
    pub latent_channels: usize,
    pub enc_blocks: usize,
    pub width: usize,
    pub hidden: usize,
    /// Pseudoinput crop `d`.
    pub crop: usize,
    /// Feed the scaled sum of all latents to the likelihood head; otherwise
    /// the head reads the final decoder state.
    pub aggregation: bool,
    /// Condition priors on pseudoinputs; otherwise `u_x = 0` and the
    /// entropy and diffusion terms are dropped.
    pub pseudoinput: bool,
    pub log_sigma_init: f64,
    pub prior_width: usize,
    pub prior_blocks: usize,
    pub diffusion: DiffusionSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 28,
            channels: 1,
            scales: vec![(14, 4), (7, 4)],
            latent_channels: 1,
            enc_blocks: 3,
            width: 32,
            hidden: 32,
            crop: 7,
            aggregation: true,
            pseudoinput: true,
            log_sigma_init: -2.0,
            prior_width: 16,
            prior_blocks: 2,
            diffusion: DiffusionSchedule::default(),
        }
    }
}

impl ModelConfig {
    /// Two layers on 4x4 images; for tests.
    pub fn tiny() -> Self {
        Self {
            image_side: 4,
            channels: 1,
            scales: vec![(2, 1), (1, 1)],
            latent_channels: 1,
            enc_blocks: 1,
            width: 4,
            hidden: 4,
            crop: 2,
            prior_width: 4,
            prior_blocks: 1,
            diffusion: DiffusionSchedule {
                steps: 5,
                ..DiffusionSchedule::default()
            },
            ..Self::default()
        }
    }

    pub fn layers(&self) -> usize {
        self.scales.iter().map(|s| s.1).sum()
    }

    /// Side of every layer in processing order.
    pub fn layer_sides(&self) -> Vec<usize> {
        self.scales
            .iter()
            .rev()
            .flat_map(|&(side, n)| std::iter::repeat_n(side, n))
            .collect()
    }

    pub fn pseudoinput_dim(&self) -> usize {
        self.channels * self.crop * self.crop
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DvpError::Config(m));
        if self.scales.is_empty() || self.layers() == 0 {
            return bad("at least one stochastic layer is required".into());
        }
        if self.channels == 0 || self.latent_channels == 0 || self.width == 0 || self.hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        let mut prev = self.image_side;
        for (k, &(side, n)) in self.scales.iter().enumerate() {
            if n == 0 {
                return bad(format!("scale {side} has no layers"));
            }
            if side == 0 || side > prev || prev % side != 0 || (k > 0 && side == prev) {
                return bad(format!("scale side {side} does not evenly shrink {prev}"));
            }
            prev = side;
        }
        if self.crop == 0 || self.crop > self.image_side {
            return bad(format!("crop {} outside 1..={}", self.crop, self.image_side));
        }
        if self.prior_width == 0 || self.prior_width % 2 != 0 {
            return bad("prior width must be even and positive".into());
        }
        Ok(())
    }
}

/// Where a layer draws its latent from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSource {
    Posterior,
    /// Prior draw with the standard deviation scaled by `temperature`.
    Prior { temperature: f64 },
}

#[derive(Clone, Debug)]
struct TopDownBlock {
    side: usize,
    prior_res: ResBlock,
    prior_out: Conv,
    post_res: ResBlock,
    post_out: Conv,
    /// Absent on the last layer when the head reads aggregated latents.
    z_proj: Option<Conv>,
    update: Option<ResBlock>,
}

/// Result of one top-down block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub z: Var,
    pub h_dec: Var,
    pub prior: DiagGaussian,
    pub posterior: Option<DiagGaussian>,
}

/// Per-term decomposition of the objective, averaged over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboReport {
    pub recon: f64,
    /// One entry per layer, in processing order.
    pub kl: Vec<f64>,
    pub entropy: f64,
    pub l0: f64,
    pub l1: f64,
    pub lt: f64,
    pub elbo: f64,
    pub per_sample_elbo: Vec<f64>,
}

impl ElboReport {
    /// `recon - sum(kl) + entropy + l0 - l1 - lt`.
    pub fn parts_sum(&self) -> f64 {
        self.recon - self.kl.iter().sum::<f64>() + self.entropy + self.l0 - self.l1 - self.lt
    }

    pub fn total_kl(&self) -> f64 {
        self.kl.iter().sum()
    }
}

/// Graph handles produced by [`LadderVae::forward_train`].
pub struct TrainOutput {
    /// Negative batch-mean ELBO.
    pub loss: Var,
    pub elbo: Var,
    pub report: ElboReport,
}

/// Output of [`LadderVae::generate`].
#[derive(Clone, Debug)]
pub struct Generated<T> {
    /// Sampled pseudoinputs `[n, c, d, d]`; absent without pseudoinputs.
    pub u: Option<Tensor<T>>,
    pub u_x: Tensor<T>,
    /// Bernoulli means `[n, c, D, D]`.
    pub images: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LadderVae<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    transform: PseudoinputTransform<T>,
    stem: Conv,
    encoder: Vec<Vec<ResBlock>>,
    dec_top: ParamId,
    dec_scale: Vec<ParamId>,
    blocks: Vec<TopDownBlock>,
    agg: Vec<Conv>,
    head_res: ResBlock,
    head_out: Conv,
    log_sigma: ParamId,
    prior_net: EpsNet,
}

fn mean_of<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    let t = g.value(v);
    t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.len().max(1) as f64
}

impl<T: Real> LadderVae<T> {
    pub fn new(config: ModelConfig, norm: NormMatrix, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if norm.channels() != config.channels || norm.crop() != config.crop {
            return Err(DvpError::Config(format!(
                "normalization matrix is {}x{}x{}, model expects {}x{}x{}",
                norm.channels(),
                norm.crop(),
                norm.crop(),
                config.channels,
                config.crop,
                config.crop
            )));
        }
        let transform = PseudoinputTransform::new(norm, config.image_side)?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (c, w, hid, cz) = (config.channels, config.width, config.hidden, config.latent_channels);

        let stem = Conv::new(s, "model.enc.stem", c, w, 3, 1.0, rng)?;
        let mut encoder = Vec::new();
        for &(side, _) in &config.scales {
            let blocks = (0..config.enc_blocks)
                .map(|b| ResBlock::with_hidden(s, &format!("model.enc.s{side}.b{b}"), w, hid, w, rng))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
        }

        let top = config.scales.last().expect("validated").0;
        let dec_top = s.add_zeros("model.dec.top", &[w, top, top])?;
        let mut dec_scale = Vec::new();
        for &(side, _) in config.scales.iter().rev().skip(1) {
            dec_scale.push(s.add_zeros(format!("model.dec.s{side}.bias"), &[w, side, side])?);
        }

        let mut blocks = Vec::new();
        let layers = config.layers();
        for (l, side) in config.layer_sides().into_iter().enumerate() {
            let p = format!("model.td{l}");
            let feeds_on = !(config.aggregation && l + 1 == layers);
            blocks.push(TopDownBlock {
                side,
                prior_res: ResBlock::with_hidden(s, &format!("{p}.prior"), w + c, hid, w, rng)?,
                prior_out: Conv::new(s, &format!("{p}.prior_out"), w, 2 * cz, 1, 0.1, rng)?,
                post_res: ResBlock::with_hidden(s, &format!("{p}.post"), w, hid, w, rng)?,
                post_out: Conv::new(s, &format!("{p}.post_out"), w, 2 * cz, 1, 0.1, rng)?,
                z_proj: feeds_on
                    .then(|| Conv::new(s, &format!("{p}.z_proj"), cz, w, 1, 1.0, rng))
                    .transpose()?,
                update: feeds_on
                    .then(|| ResBlock::with_hidden(s, &format!("{p}.update"), w, hid, w, rng))
                    .transpose()?,
            });
        }

        let agg = if config.aggregation {
            (0..config.layers())
                .map(|l| Conv::new(s, &format!("model.agg{l}"), cz, w, 1, 1.0, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head_res = ResBlock::with_hidden(s, "model.head.res", w, hid, w, rng)?;
        let head_out = Conv::new(s, "model.head.out", w, c, 3, 1.0, rng)?;
        let log_sigma = s.add("model.log_sigma", Tensor::from_f64(&[1], &[config.log_sigma_init])?)?;
        let prior_net = EpsNet::new(s, "prior", c, config.prior_width, config.prior_blocks, rng)?;

        Ok(Self {
            config,
            store,
            transform,
            stem,
            encoder,
            dec_top,
            dec_scale,
            blocks,
            agg,
            head_res,
            head_out,
            log_sigma,
            prior_net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn transform(&self) -> &PseudoinputTransform<T> {
        &self.transform
    }

    pub fn norm(&self) -> &NormMatrix {
        self.transform.norm()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.config.diffusion
    }

    pub fn prior_net(&self) -> &EpsNet {
        &self.prior_net
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Copy of the model whose weights are the EMA shadows.
    pub fn ema_model(&self) -> Self {
        let mut m = self.clone();
        m.store = self.store.ema_view();
        m
    }

    fn check_images(&self, x: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match *x.shape() {
            [n, xc, h, w] if n > 0 && xc == c.channels && h == c.image_side && w == c.image_side => Ok(n),
            _ => Err(DvpError::dim(
                "model input",
                format!(
                    "expected [n, {}, {}, {}], got {:?}",
                    c.channels,
                    c.image_side,
                    c.image_side,
                    x.shape()
                ),
            )),
        }
    }

    /// Encoder features, one per scale from high to low resolution.
    pub fn bottom_up(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let s = &self.store;
        let mut h = self.stem.forward(g, s, x)?;
        let mut out = Vec::with_capacity(self.encoder.len());
        for (blocks, &(side, _)) in self.encoder.iter().zip(&self.config.scales) {
            let cur = g.shape(h)[2];
            if cur != side {
                h = g.avg_pool2d(h, cur / side)?;
            }
            for b in blocks {
                h = b.forward(g, s, h, None)?;
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Top-down block `l`. `h_enc` is required when drawing from the
    /// posterior.
    pub fn topdown_block(
        &self,
        g: &mut Graph<T>,
        l: usize,
        h_dec: Var,
        h_enc: Option<Var>,
        u_x: Var,
        source: LayerSource,
        rng: &mut Rng,
    ) -> Result<BlockOutput> {
        let s = &self.store;
        let block = self
            .blocks
            .get(l)
            .ok_or_else(|| DvpError::usage(format!("no layer {l}")))?;
        let pool = self.config.image_side / block.side;
        let u_p = if pool > 1 { g.avg_pool2d(u_x, pool)? } else { u_x };
        let prior_in = g.concat_channels(&[h_dec, u_p])?;
        let p = block.prior_res.forward(g, s, prior_in, None)?;
        let p = block.prior_out.forward(g, s, p)?;
        let prior = DiagGaussian::from_channels(g, p)?;

        let (z, posterior) = match source {
            LayerSource::Posterior => {
                let h_enc = h_enc.ok_or_else(|| DvpError::usage("posterior draw needs encoder features"))?;
                let q_in = g.add(h_dec, h_enc)?;
                let q = block.post_res.forward(g, s, q_in, None)?;
                let q = block.post_out.forward(g, s, q)?;
                let q = DiagGaussian::from_channels(g, q)?;
                (rsample(g, &q, 1.0, rng)?, Some(q))
            }
            LayerSource::Prior { temperature } => (rsample(g, &prior, temperature, rng)?, None),
        };

        let h_dec = match (&block.z_proj, &block.update) {
            (Some(proj), Some(update)) => {
                let zp = proj.forward(g, s, z)?;
                let h = g.add(h_dec, zp)?;
                update.forward(g, s, h, None)?
            }
            _ => h_dec,
        };
        Ok(BlockOutput {
            z,
            h_dec,
            prior,
            posterior,
        })
    }

    /// Run every top-down block; `feats` are the bottom-up features.
    pub fn topdown(
        &self,
        g: &mut Graph<T>,
        n: usize,
        feats: Option<&[Var]>,
        u_x: Var,
        sources: &[LayerSource],
        rng: &mut Rng,
    ) -> Result<Vec<BlockOutput>> {
        if sources.len() != self.blocks.len() {
            return Err(DvpError::usage(format!(
                "{} layer sources for {} layers",
                sources.len(),
                self.blocks.len()
            )));
        }
        let top = g.param(&self.store, self.dec_top);
        let mut h = g.broadcast_batch(top, n);
        let mut scale_entry = 0;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let cur = g.shape(h)[2];
            if cur != block.side {
                h = g.upsample_nearest(h, block.side / cur)?;
                let b = g.param(&self.store, self.dec_scale[scale_entry]);
                let b = g.broadcast_batch(b, n);
                h = g.add(h, b)?;
                scale_entry += 1;
            }
            let k = self
                .config
                .scales
                .iter()
                .position(|&(side, _)| side == block.side)
                .expect("layer side is a configured scale");
            let h_enc = feats.map(|f| f[k]);
            let out = self.topdown_block(g, l, h, h_enc, u_x, sources[l], rng)?;
            h = out.h_dec;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Scaled sum of per-layer projections of the latents at image
    /// resolution.
    pub fn aggregate_latents(&self, g: &mut Graph<T>, zs: &[Var]) -> Result<Var> {
        if zs.len() != self.agg.len() {
            return Err(DvpError::usage(format!(
                "{} latents for {} aggregation projections",
                zs.len(),
                self.agg.len()
            )));
        }
        let side = self.config.image_side;
        let mut acc: Option<Var> = None;
        for (z, proj) in zs.iter().zip(&self.agg) {
            let p = proj.forward(g, &self.store, *z)?;
            let up = side / g.shape(p)[2];
            let p = if up > 1 { g.upsample_nearest(p, up)? } else { p };
            acc = Some(match acc {
                Some(a) => g.add(a, p)?,
                None => p,
            });
        }
        let acc = acc.ok_or_else(|| DvpError::usage("no latents to aggregate"))?;
        Ok(g.scale(acc, 1.0 / (zs.len() as f64).sqrt()))
    }

    pub fn likelihood_head(&self, g: &mut Graph<T>, h: Var) -> Result<BernoulliLikelihood> {
        let h = self.head_res.forward(g, &self.store, h, None)?;
        let h = g.silu(h);
        let logits = self.head_out.forward(g, &self.store, h)?;
        Ok(BernoulliLikelihood { logits })
    }

    fn decode(&self, g: &mut Graph<T>, outs: &[BlockOutput]) -> Result<BernoulliLikelihood> {
        let h = if self.config.aggregation {
            let zs: Vec<Var> = outs.iter().map(|o| o.z).collect();
            self.aggregate_latents(g, &zs)?
        } else {
            let h = outs.last().expect("at least one layer").h_dec;
            let up = self.config.image_side / g.shape(h)[2];
            if up > 1 {
                g.upsample_nearest(h, up)?
            } else {
                h
            }
        };
        self.likelihood_head(g, h)
    }

    fn pseudoinput(&self, g: &mut Graph<T>, x: &Tensor<T>, rng: &mut Rng) -> Result<(Var, Option<(Var, Var)>)> {
        if self.config.pseudoinput {
            let ls = g.param(&self.store, self.log_sigma);
            let pair = sample_pseudoinput(g, &self.transform, x, ls, rng)?;
            Ok((pair.u_x, Some((pair.u, pair.log_sigma))))
        } else {
            Ok((g.constant(Tensor::zeros(x.shape())), None))
        }
    }

    /// Build the training objective for a binary batch `x: [n, c, D, D]`.
    pub fn forward_train(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        rng: &mut Rng,
        mode: VlbMode,
    ) -> Result<TrainOutput> {
        let n = self.check_images(x)?;
        let (u_x, pseudo) = self.pseudoinput(g, x, rng)?;
        let xv = g.constant(x.clone());
        let feats = self.bottom_up(g, xv)?;
        let sources = vec![LayerSource::Posterior; self.blocks.len()];
        let outs = self.topdown(g, n, Some(&feats), u_x, &sources, rng)?;
        let lik = self.decode(g, &outs)?;

        let recon = bernoulli_log_prob(g, &lik, x)?;
        let mut report = ElboReport {
            recon: mean_of(g, recon),
            ..ElboReport::default()
        };
        let mut elbo = recon;
        for o in &outs {
            let q = o.posterior.expect("posterior pass");
            let kl = kl_diag_gaussian(g, &q, &o.prior)?;
            report.kl.push(mean_of(g, kl));
            elbo = g.sub(elbo, kl)?;
        }
        if let Some((u, log_sigma)) = pseudo {
            let h = gaussian_entropy_var(g, log_sigma, self.config.pseudoinput_dim());
            report.entropy = g.scalar(h);
            elbo = g.add_scalar(elbo, h)?;
            let net = self.prior_net.bind(&self.store);
            let terms = l_vlb(g, &self.config.diffusion, &net, u, rng, mode)?;
            report.l0 = mean_of(g, terms.l0);
            report.l1 = mean_of(g, terms.l1);
            report.lt = mean_of(g, terms.lt);
            let vlb = terms.vlb(g)?;
            elbo = g.add(elbo, vlb)?;
        }
        report.elbo = mean_of(g, elbo);
        report.per_sample_elbo = g.value(elbo).to_f64();
        let m = g.mean(elbo);
        let loss = g.neg(m);
        if !g.scalar(loss).is_finite() {
            return Err(DvpError::TrainingFault(format!("non-finite loss; parts {report:?}")));
        }
        Ok(TrainOutput { loss, elbo, report })
    }

    /// Objective decomposition without keeping the graph.
    pub fn evaluate(&self, x: &Tensor<T>, rng: &mut Rng, mode: VlbMode) -> Result<ElboReport> {
        let mut g = Graph::new();
        Ok(self.forward_train(&mut g, x, rng, mode)?.report)
    }

    /// Unconditional samples: pseudoinputs from the diffusion prior, then
    /// the prior ladder at `temperature`.
    pub fn generate(&self, n: usize, temperature: f64, rng: &mut Rng) -> Result<Generated<T>> {
        let c = &self.config;
        let (u, u_x) = if c.pseudoinput {
            let net = self.prior_net.bind(&self.store);
            let u = sample_prior(&c.diffusion, &net, &[n, c.channels, c.crop, c.crop], rng)?;
            let u_x = self.transform.inverse(&u)?;
            (Some(u), u_x)
        } else {
            (None, Tensor::zeros(&[n, c.channels, c.image_side, c.image_side]))
        };
        let images = self.decode_from_pseudoinput(&u_x, temperature, rng)?;
        Ok(Generated { u, u_x, images })
    }

    /// Bernoulli means of the prior ladder conditioned on a given lift `u_x`.
    pub fn decode_from_pseudoinput(&self, u_x: &Tensor<T>, temperature: f64, rng: &mut Rng) -> Result<Tensor<T>> {
        let n = self.check_images(u_x)?;
        let mut g = Graph::new();
        let uv = g.constant(u_x.clone());
        let sources = vec![LayerSource::Prior { temperature }; self.blocks.len()];
        let outs = self.topdown(&mut g, n, None, uv, &sources, rng)?;
        let lik = self.decode(&mut g, &outs)?;
        Ok(lik.mean(&g))
    }

    /// Reconstruction using posterior latents only at the listed scale
    /// sides and low-temperature prior draws elsewhere.
    pub fn generative_reconstruction(
        &self,
        x: &Tensor<T>,
        posterior_sides: &[usize],
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Tensor<T>> {
        let n = self.check_images(x)?;
        for side in posterior_sides {
            if !self.config.scales.iter().any(|s| s.0 == *side) {
                return Err(DvpError::usage(format!("unknown scale {side}")));
            }
        }
        let mut g = Graph::new();
        let (u_x, _) = self.pseudoinput(&mut g, x, rng)?;
        let xv = g.constant(x.clone());
        let feats = self.bottom_up(&mut g, xv)?;
        let sources: Vec<LayerSource> = self
            .blocks
            .iter()
            .map(|b| {
                if posterior_sides.contains(&b.side) {
                    LayerSource::Posterior
                } else {
                    LayerSource::Prior { temperature }
                }
            })
            .collect();
        let outs = self.topdown(&mut g, n, Some(&feats), u_x, &sources, rng)?;
        let lik = self.decode(&mut g, &outs)?;
        Ok(lik.mean(&g))
    }

    /// Posterior means of every layer along one posterior chain.
    pub fn posterior_means(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<Vec<Tensor<T>>> {
        let n = self.check_images(x)?;
        let mut g = Graph::new();
        let (u_x, _) = self.pseudoinput(&mut g, x, rng)?;
        let xv = g.constant(x.clone());
        let feats = self.bottom_up(&mut g, xv)?;
        let sources = vec![LayerSource::Posterior; self.blocks.len()];
        let outs = self.topdown(&mut g, n, Some(&feats), u_x, &sources, rng)?;
        Ok(outs
            .iter()
            .map(|o| g.value(o.posterior.expect("posterior pass").mu).clone())
            .collect())
    }
}
