use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::condition::CondStack;
use super::config::DenoiserConfig;
use crate::error::{Result, SalientError};
use crate::nn::layers::{self, attention, conv, init_attention, init_conv, init_linear, init_norm, init_resblock, resblock};
use crate::nn::{ConvSpec, Graph, Var};
use crate::params::{Init, ParamTree, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::WaveletCoeffs;

/// Parameter holding the four per-band frequency gains.
pub const FSA_GAINS: &str = "fsa.gamma";

const OUT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn has_attention(&self, level: usize) -> bool {
        level + self.config.attention_levels >= self.config.levels
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamTree<T> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let k = [3, 3];
        let emb = cfg.emb_dim();
        init.fill(FSA_GAINS, &[4], 0.0);
        init_linear(&mut init, "time.l1", emb, cfg.time_dim, 1.0);
        init_linear(&mut init, "time.l2", emb, emb, 1.0);
        init_conv(&mut init, "conv_in", cfg.channels(0), 4 + cfg.cond_channels(), &k, 1.0);
        let mut ch = cfg.channels(0);
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            init_resblock(&mut init, &format!("enc{l}.res"), ch, c, emb, &k);
            if self.has_attention(l) {
                init_attention(&mut init, &format!("enc{l}.attn"), c);
            }
            if l + 1 < cfg.levels {
                init_conv(&mut init, &format!("down{l}"), c, c, &k, 1.0);
            }
            ch = c;
        }
        init_resblock(&mut init, "mid.res1", ch, ch, emb, &k);
        if cfg.attention_levels > 0 {
            init_attention(&mut init, "mid.attn", ch);
        }
        init_resblock(&mut init, "mid.res2", ch, ch, emb, &k);
        for l in (0..cfg.levels).rev() {
            let c = cfg.channels(l);
            init_resblock(&mut init, &format!("dec{l}.res"), 2 * c, c, emb, &k);
            if self.has_attention(l) {
                init_attention(&mut init, &format!("dec{l}.attn"), c);
            }
            if l > 0 {
                init_conv(&mut init, &format!("up{l}"), cfg.channels(l - 1), c, &k, 1.0);
            }
        }
        init_norm(&mut init, "out.norm", cfg.channels(0));
        init_conv(&mut init, "out.conv", 4, cfg.channels(0), &k, OUT_GAIN);
        init.finish()
    }

    fn check_inputs<T: Scalar>(&self, w_t: &WaveletCoeffs<T>, cond: &CondStack<T>) -> Result<()> {
        self.config.check_slice(2 * w_t.h, 2 * w_t.w)?;
        if w_t.data.len() != 4 * w_t.h * w_t.w {
            return Err(SalientError::dim("wavelet stack length does not match its grid"));
        }
        if cond.h != w_t.h || cond.w != w_t.w {
            return Err(SalientError::dim(format!(
                "conditioning grid {}x{} does not match wavelet grid {}x{}",
                cond.h, cond.w, w_t.h, w_t.w
            )));
        }
        if cond.num_channels() != self.config.cond_channels() {
            return Err(SalientError::dim(format!(
                "expected {} conditioning channels, got {}",
                self.config.cond_channels(),
                cond.num_channels()
            )));
        }
        Ok(())
    }

    /// Record the network on `g`; returns the `[4, h, w]` clean-coefficient
    /// prediction.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        w_t: &WaveletCoeffs<T>,
        t: usize,
        cond: &CondStack<T>,
    ) -> Result<Var> {
        self.check_inputs(w_t, cond)?;
        let cfg = &self.config;
        let (h, w) = (w_t.h, w_t.w);
        let same = ConvSpec::same2d(3);

        // mask-gated per-band scaling of the noisy input
        let gamma = pv.get(FSA_GAINS);
        let th = g.tanh(gamma);
        let m = cond.channel(0);
        let mask4 = g.constant(Tensor::from_vec(&[4, h, w], m.repeat(4))?);
        let gate = g.mul_chan(mask4, th);
        let gate = g.add_scalar(gate, T::one());
        let wt = g.constant(Tensor::from_vec(&[4, h, w], w_t.data.clone())?);
        let wm = g.mul(wt, gate);
        let c = g.constant(cond.channels.clone());
        let x = g.concat(&[wm, c]);

        let e = g.constant(layers::sinusoidal_embedding(t as f64, cfg.time_dim));
        let e = layers::linear(g, pv, "time.l1", e);
        let e = g.silu(e);
        let e = layers::linear(g, pv, "time.l2", e);
        let emb = g.silu(e);

        let mut hcur = conv(g, pv, "conv_in", x, same);
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            hcur = resblock(g, pv, &format!("enc{l}.res"), hcur, Some(emb), same);
            if self.has_attention(l) {
                hcur = attention(g, pv, &format!("enc{l}.attn"), hcur);
            }
            skips.push(hcur);
            if l + 1 < cfg.levels {
                hcur = conv(g, pv, &format!("down{l}"), hcur, ConvSpec::down2d());
            }
        }
        hcur = resblock(g, pv, "mid.res1", hcur, Some(emb), same);
        if cfg.attention_levels > 0 {
            hcur = attention(g, pv, "mid.attn", hcur);
        }
        hcur = resblock(g, pv, "mid.res2", hcur, Some(emb), same);
        for l in (0..cfg.levels).rev() {
            hcur = g.concat(&[hcur, skips[l]]);
            hcur = resblock(g, pv, &format!("dec{l}.res"), hcur, Some(emb), same);
            if self.has_attention(l) {
                hcur = attention(g, pv, &format!("dec{l}.attn"), hcur);
            }
            if l > 0 {
                hcur = g.upsample(hcur, [1, 2, 2]);
                hcur = conv(g, pv, &format!("up{l}"), hcur, same);
            }
        }
        let o = layers::norm(g, pv, "out.norm", hcur);
        let o = g.silu(o);
        Ok(conv(g, pv, "out.conv", o, same))
    }

    /// Clean-coefficient prediction without recording gradients.
    pub fn denoise<T: Scalar>(
        &self,
        w_t: &WaveletCoeffs<T>,
        t: usize,
        cond: &CondStack<T>,
        params: &ParamTree<T>,
    ) -> Result<WaveletCoeffs<T>> {
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let out = self.forward(&mut g, &pv, w_t, t, cond)?;
        WaveletCoeffs::new(w_t.h, w_t.w, g.value(out).data().to_vec())
    }

    pub fn fsa_gains<T: Scalar>(params: &ParamTree<T>) -> Option<[T; 4]> {
        params.get(FSA_GAINS).map(|t| [t.data()[0], t.data()[1], t.data()[2], t.data()[3]])
    }
}
