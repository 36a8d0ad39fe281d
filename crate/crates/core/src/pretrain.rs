//! Supervised pretraining of the backbone on classes kept out of the
//! incremental stream.

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::classifier::{cosine_logits_tape, CosineClassifier, MarginLossConfig};
use crate::config::{BackboneInit, PretrainConfig};
use crate::data::{Dataset, SyntheticSpec, SyntheticWorld};
use crate::error::Result;
use crate::optim::{cosine_lr, Sgd};
use crate::seeds::{self, Purpose};
use crate::tape::Tape;
use crate::vit::{self, BackboneConfig, BackboneParams, NoHook};

/// Loss of each pretraining epoch and the final training accuracy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// The base-class dataset: classes `spec.classes .. spec.classes + cfg.classes`
/// of the synthetic world, rendered at the backbone's geometry.
pub fn base_dataset(backbone: &BackboneConfig, cfg: &PretrainConfig, spec: &SyntheticSpec) -> Result<Dataset> {
    let spec = SyntheticSpec {
        image_size: backbone.image_size,
        channels: backbone.channels,
        ..spec.clone()
    };
    let world = SyntheticWorld::new(spec)?;
    let classes: Vec<usize> = (world.spec().classes..world.spec().classes + cfg.classes).collect();
    world.sample(&classes, cfg.per_class, cfg.seed, 2)
}

/// Frozen backbone built according to `cfg.init`.
pub fn build_backbone(
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
    spec: &SyntheticSpec,
    loss: MarginLossConfig,
) -> Result<(BackboneParams, PretrainReport)> {
    let mut params = BackboneParams::init(backbone.clone(), &mut seeds::stream(cfg.seed, Purpose::BackboneInit, &[]))?;
    let report = match cfg.init {
        BackboneInit::Random => PretrainReport::default(),
        BackboneInit::Pretrained => {
            let data = base_dataset(backbone, cfg, spec)?;
            pretrain(&mut params, &data, cfg, loss)?
        }
    };
    params.frozen = true;
    Ok((params, report))
}

/// Loads the backbone cached at `path` when it was built from the same
/// recipe, otherwise builds it and writes the cache.
pub fn load_or_build(path: &std::path::Path, cfg: &crate::config::ExperimentConfig) -> Result<BackboneParams> {
    let recipe = recipe(cfg);
    if let Ok(c) = Checkpoint::load(path) {
        if c.meta("recipe").ok() == Some(recipe.as_str()) {
            let mut params = BackboneParams::from_checkpoint(&c)?;
            params.frozen = true;
            return Ok(params);
        }
    }
    let (params, _) = build_backbone(&cfg.backbone, &cfg.pretrain, &cfg.data.synthetic, cfg.train.margin_loss())?;
    let mut c = params.to_checkpoint()?;
    c.set_meta("recipe", recipe);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    c.save(path)?;
    Ok(params)
}

/// Every setting that influences the pretrained weights, as TOML.
fn recipe(cfg: &crate::config::ExperimentConfig) -> String {
    #[derive(serde::Serialize)]
    struct Recipe<'a> {
        backbone: &'a BackboneConfig,
        pretrain: &'a PretrainConfig,
        synthetic: &'a SyntheticSpec,
        scale: f64,
        margin: f64,
    }
    toml::to_string(&Recipe {
        backbone: &cfg.backbone,
        pretrain: &cfg.pretrain,
        synthetic: &cfg.data.synthetic,
        scale: cfg.train.scale,
        margin: cfg.train.margin,
    })
    .expect("recipe serializes")
}

/// Patches of images `idx` as one `[B*L, patch_dim]` matrix.
pub fn batch_patches(config: &BackboneConfig, data: &Dataset, idx: &[usize]) -> Result<crate::Tensor> {
    let mut out = Vec::with_capacity(idx.len() * config.patches() * config.patch_dim());
    for &i in idx {
        out.extend(vit::patchify(config, &data.normalized(i))?);
    }
    crate::Tensor::new([idx.len() * config.patches(), config.patch_dim()], out)
}

/// Trains every backbone weight and a throwaway cosine head on `data`.
pub fn pretrain(params: &mut BackboneParams, data: &Dataset, cfg: &PretrainConfig, loss: MarginLossConfig) -> Result<PretrainReport> {
    let config = params.config.clone();
    let mut head = CosineClassifier::new(config.dim);
    head.add_classes(&(0..data.classes).collect::<Vec<_>>(), &mut seeds::stream(cfg.seed, Purpose::ClassifierInit, &[u64::MAX]))?;
    let mut head_rows = head.rows();
    let mut opt = Sgd::new(0.9);
    let batches = data.len().div_ceil(cfg.batch);
    let total = cfg.epochs * batches;
    let mut report = PretrainReport::default();
    let mut correct = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeds::stream(cfg.seed, Purpose::PretrainShuffle, &[epoch as u64]));
        let mut sum = 0.0;
        correct = 0;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true);
            let x = tape.constant(batch_patches(&config, data, idx)?);
            let tokens = vit::forward(&mut tape, &config, &vars, x, idx.len(), &mut NoHook)?;
            let cls = tape.gather_rows(tokens, vit::class_rows(idx.len(), config.seq_len()))?;
            let w = tape.param(head_rows.clone());
            let logits = cosine_logits_tape(&mut tape, cls, w)?;
            let targets: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
            let l = tape.margin_cross_entropy(logits, &targets, loss.effective_scale(), loss.margin, None)?;
            sum += tape.value(l).data()[0];
            let lv = tape.value(logits);
            for (r, &t) in targets.iter().enumerate() {
                let row = lv.row(r);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                correct += usize::from(best == t);
            }
            tape.backward(l)?;
            let mut grads: Vec<_> = vars.all().into_iter().map(|v| tape.grad(v)).collect();
            grads.push(tape.grad(w));
            let mut targets_mut = params.tensors_mut();
            targets_mut.push(&mut head_rows);
            opt.step(targets_mut, &grads, cosine_lr(cfg.lr, epoch * batches + b, total))?;
        }
        report.losses.push(sum / batches as f64);
    }
    report.train_accuracy = 100.0 * correct as f64 / data.len().max(1) as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretraining_reduces_loss_and_freezes() {
        let backbone = BackboneConfig {
            image_size: 8,
            depth: 1,
            dim: 16,
            heads: 2,
            ..Default::default()
        };
        let spec = SyntheticSpec {
            image_size: 8,
            ..Default::default()
        };
        let cfg = PretrainConfig {
            classes: 4,
            per_class: 16,
            epochs: 4,
            lr: 0.05,
            batch: 16,
            ..Default::default()
        };
        let (params, report) = build_backbone(&backbone, &cfg, &spec, MarginLossConfig { scale: 16.0, margin: 0.0 }).unwrap();
        assert!(params.frozen);
        assert!(report.losses.last().unwrap() < &report.losses[0], "{:?}", report.losses);
        let random = PretrainConfig {
            init: BackboneInit::Random,
            ..cfg
        };
        let (p2, r2) = build_backbone(&backbone, &random, &spec, MarginLossConfig::PLAIN).unwrap();
        assert!(p2.frozen && r2.losses.is_empty());
        assert_ne!(p2, params);
    }
}
