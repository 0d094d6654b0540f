//! Parameter layout of the whole model and the per-batch losses of both phases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{roles, TrainConfig};
use crate::augment::{AugmentOutput, AugmentParams, CohortBatch};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::datagen::sub_seed;
use crate::encoders::{EncoderConfig, OutputHead, SeqBatch, SequenceEncoder};
use crate::objectives::{self, LossWeights};

/// Parameter handles of the auxiliary (burn-in) model, the main encoder and the
/// augmentation layers. Values live in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub aux_encoder: SequenceEncoder,
    pub aux_head: OutputHead,
    pub main_encoder: SequenceEncoder,
    pub augment: AugmentParams,
}

impl Architecture {
    /// Registers all parameters. Auxiliary and main parameters come from independent
    /// streams, so every variant trained from one seed starts from the same main
    /// initialisation.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &TrainConfig) -> Self {
        let enc = EncoderConfig {
            vocab_size: config.vocab_size,
            embed_dim: config.dim,
            kind: config.encoder,
            mlp_hidden: config.mlp_hidden,
            max_len: config.max_len,
        };
        let mut aux_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, roles::AUX_INIT, 0));
        let aux_encoder = SequenceEncoder::new(store, &mut aux_rng, "aux", enc.clone());
        let aux_head = OutputHead::new(store, &mut aux_rng, "aux.head", config.dim, config.head_depth);
        let mut main_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, roles::MAIN_INIT, 0));
        let main_encoder = SequenceEncoder::new(store, &mut main_rng, "main", enc);
        let augment = AugmentParams::new(store, &mut main_rng, "augment", config.dim, config.head_depth);
        Self {
            aux_encoder,
            aux_head,
            main_encoder,
            augment,
        }
    }

    pub fn aux_params(&self) -> Vec<ParamId> {
        let mut ids = self.aux_encoder.params();
        ids.extend(self.aux_head.params());
        ids
    }

    /// Parameters trained in the augmented phase.
    pub fn main_params(&self) -> Vec<ParamId> {
        let mut ids = self.main_encoder.params();
        ids.extend(self.augment.params());
        ids
    }

    pub fn dim(&self) -> usize {
        self.main_encoder.dim()
    }
}

/// Mean BCE of the auxiliary model.
pub fn burnin_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    arch: &Architecture,
    batch: &SeqBatch,
    labels: &[T],
) -> Result<Var, AutodiffError> {
    let e = arch.aux_encoder.forward(tape, store, batch)?;
    let logits = arch.aux_head.forward(tape, store, e)?;
    objectives::bce_main(tape, logits, labels)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub main: Var,
    pub sccl: Var,
    pub align: Var,
    pub total: Var,
}

/// Augmented-phase loss of one batch.
///
/// `burnin` holds the targets' burn-in vectors (`[B x n_d]`); without it the
/// alignment term is zero.
#[allow(clippy::too_many_arguments)]
pub fn augmented_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    arch: &Architecture,
    batch: &SeqBatch,
    cohorts: &CohortBatch<T>,
    burnin: Option<&Tensor<T>>,
    labels: &[T],
    weights: &LossWeights,
    aggregate: bool,
) -> Result<(LossVars, AugmentOutput), AutodiffError> {
    let h = arch.main_encoder.forward(tape, store, batch)?;
    let out = arch.augment.forward(tape, store, h, cohorts, aggregate)?;
    let main = objectives::bce_main(tape, out.logits, labels)?;
    let sccl = objectives::sccl(
        tape,
        out.logits,
        out.neg_logits,
        &cohorts.neg.offsets,
        labels,
        weights.tau,
        weights.dis,
    )?;
    let align = match burnin {
        Some(e) => {
            let ev = tape.constant(e.clone());
            objectives::align(tape, ev, h)?
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let total = objectives::total(tape, main, sccl, align, weights)?;
    Ok((LossVars { main, sccl, align, total }, out))
}
