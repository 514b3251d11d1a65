//! Optimizer, LoRA, separation loss and gradients against hand-written
//! references.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use stydeco_core::config::ExperimentConfig;
use stydeco_core::generator::GeneratorConfig;
use stydeco_core::lora::{apply_adapted, merge, LoraAdapter};
use stydeco_core::losses::separation_loss;
use stydeco_core::optim::{AdamW, AdamWConfig};
use stydeco_core::params::{ParamGroup, ParamKey, TrainableSet};
use stydeco_core::rng::seeded;
use stydeco_core::text::{ConditioningEmbedding, EmbeddingDomain, TextEncoderConfig};
use stydeco_core::train::{evaluate_losses, loss_and_grads, Models, Objective, PairSample, PromptSet};
use stydeco_core::{ImageTensor, Tensor};

#[test]
fn adamw_first_step_by_hand() {
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        weight_decay: 0.5,
    };
    let key = ParamKey::new(ParamGroup::GeneratorAdapters, "w");
    let mut p = Tensor::new(&[2], vec![1.0, -2.0]);
    let g = Tensor::new(&[2], vec![0.5, 0.0]);
    let mut opt = AdamW::new();
    opt.update(&cfg, &key, &mut p, &g);
    // Step 1: m̂ = g, v̂ = g², so the Adam step is lr·g/(|g| + ε).
    let want0 = 1.0 * (1.0 - 0.1 * 0.5) - 0.1 * 0.5 / (0.5 + 1e-8);
    let want1 = -2.0 * (1.0 - 0.1 * 0.5);
    assert!((p.data()[0] - want0).abs() < 1e-15);
    assert!((p.data()[1] - want1).abs() < 1e-15);

    // Step 2 by hand.
    let g2 = Tensor::new(&[2], vec![-1.0, 2.0]);
    opt.update(&cfg, &key, &mut p, &g2);
    let mut want = [want0, want1];
    for i in 0..2 {
        let (a, b) = ([0.5, 0.0][i], [-1.0, 2.0][i]);
        let m = 0.9 * (0.1 * a) + 0.1 * b;
        let v = 0.99 * (0.01 * a * a) + 0.01 * b * b;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.99f64 * 0.99);
        want[i] = want[i] * (1.0 - 0.05) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
    }
    assert!((p.data()[0] - want[0]).abs() < 1e-14);
    assert!((p.data()[1] - want[1]).abs() < 1e-14);
}

#[test]
fn lora_merge_equals_apply() {
    let mut rng = seeded(8);
    let w = Tensor::randn(&[12, 20], 0.3, &mut rng);
    let mut ad = LoraAdapter::init("l", 20, 12, 4, 8.0, 1).unwrap();
    ad.b = Tensor::randn(&[12, 4], 0.5, &mut rng);
    let merged = merge(&w, &ad).unwrap();
    for _ in 0..100 {
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = apply_adapted(&w, &ad, &x).unwrap();
        for (i, ai) in a.iter().enumerate() {
            let m: f64 = (0..20).map(|j| merged.data()[i * 20 + j] * x[j]).sum();
            assert!((ai - m).abs() <= 1e-6);
        }
    }
}

fn emb(rows: &[[f64; 3]], domain: EmbeddingDomain) -> ConditioningEmbedding {
    let mut values: Vec<f64> = rows.iter().flatten().copied().collect();
    values.extend([9.0, 9.0, 9.0]); // padding row, must be ignored
    ConditioningEmbedding {
        values: Tensor::new(&[rows.len() + 1, 3], values),
        mask: (0..=rows.len()).map(|i| i < rows.len()).collect(),
        domain,
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[test]
fn separation_matches_softmax_reference() {
    let tau = 0.2;
    let src = [
        emb(&[[1.0, 0.0, 0.2], [0.8, 0.1, 0.0]], EmbeddingDomain::Source),
        emb(&[[0.9, 0.3, 0.0]], EmbeddingDomain::Source),
    ];
    let tgt = [
        emb(&[[0.0, 1.0, 0.1]], EmbeddingDomain::Target),
        emb(&[[0.2, 0.7, 0.5], [0.0, 0.9, 0.3]], EmbeddingDomain::Target),
    ];
    let pool = |e: &ConditioningEmbedding| -> [f64; 3] {
        let p = e.pooled();
        unit([p[0], p[1], p[2]])
    };
    let s: Vec<[f64; 3]> = src.iter().map(pool).collect();
    let t: Vec<[f64; 3]> = tgt.iter().map(pool).collect();
    let centroid = |v: &[[f64; 3]]| {
        let n = v.len() as f64;
        unit([0, 1, 2].map(|k| v.iter().map(|x| x[k]).sum::<f64>() / n))
    };
    let protos = [centroid(&s), centroid(&t)];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut total = 0.0;
    for (label, x) in s.iter().map(|x| (0, *x)).chain(t.iter().map(|x| (1, *x))) {
        let logits = protos.map(|p| dot(x, p) / tau);
        let lse = (logits[0].exp() + logits[1].exp()).ln();
        total += lse - logits[label];
    }
    let want = total / 4.0;
    let got = separation_loss(&src, &tgt, tau).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

fn gradcheck_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        text_encoder: TextEncoderConfig {
            max_tokens: 12,
            d_model: 16,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
        },
        generator: GeneratorConfig {
            vae_channels: vec![4, 6, 8],
            latent_channels: 4,
            unet_channels: 8,
            unet_heads: 2,
            ffn_mult: 2,
            d_cond: 16,
            timestep_dim: 8,
            skip_connections: true,
        },
        ..Default::default()
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let cfg = gradcheck_config();
    let mut models = Models::init(&cfg).unwrap();
    let mut rng = seeded(4);
    // Zero-initialized B would make every A gradient vanish.
    let adapter_groups = [ParamGroup::GeneratorAdapters, ParamGroup::SourceAdapters, ParamGroup::TargetAdapters];
    let mut keys = Vec::new();
    for g in adapter_groups {
        for (name, _) in models.group_tensors(g) {
            keys.push(ParamKey::new(g, name));
        }
    }
    for k in &keys {
        if k.name.ends_with(".B") {
            let t = models.tensor_mut(k).unwrap();
            *t = Tensor::randn(t.shape(), 0.05, &mut rng);
        }
    }
    let prompts = PromptSet::new(&["a photo", "a snapshot"], &["a painting", "brushwork"], 12).unwrap();
    let batch: Vec<PairSample> = (0..2)
        .map(|i| PairSample {
            source: ImageTensor::new(Tensor::randn(&[3, 16, 16], 0.4, &mut seeded(50 + i))).unwrap(),
            pseudo: ImageTensor::new(Tensor::randn(&[3, 16, 16], 0.4, &mut seeded(60 + i))).unwrap(),
        })
        .collect();
    let obj = Objective::from_config(&cfg);
    let (_, grads): (_, BTreeMap<ParamKey, Tensor>) =
        loss_and_grads(&models, &prompts, &batch, &obj, TrainableSet::of(&adapter_groups)).unwrap();

    let h = 1e-6;
    for _ in 0..12 {
        let key = keys.choose(&mut rng).unwrap().clone();
        let idx = rng.random_range(0..models.tensor(&key).unwrap().len());
        let orig = models.tensor(&key).unwrap().data()[idx];
        let mut eval = |v: f64| {
            models.tensor_mut(&key).unwrap().data_mut()[idx] = v;
            evaluate_losses(&models, &prompts, &batch, &obj).unwrap().total
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let an = grads[&key].data()[idx];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-3, "{key}[{idx}]: analytic {an}, numeric {fd}, rel {rel}");
    }
}
