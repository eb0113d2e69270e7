mod common;

use common::{random_mask_frame, rng, tiny_global, tiny_model};
use percdf::encoder::PerceiverConfig;
use percdf::graph::Graph;
use percdf::memscale::{
    fit_slope, read_scaling_csv, run_scaling, write_scaling_csv, ScalingConfig, SweepAxis, VariantSpec,
};
use percdf::model::{EncoderConfig, Model};
use percdf::params::Ctx;
use percdf::scheduler::{PermutationMode, WindowPolicy};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn encoder_and_decoder_counts_are_exact(
        seed in 0u64..10_000,
        l in 1usize..6,
        heads in 1usize..4,
        layers in 1usize..4,
        copula_layers in 1usize..3,
    ) {
        let f = random_mask_frame(&mut rng(seed), 2, 6, 0.5);
        let (n, o) = (f.points.len() as u64, f.observed_count() as u64);
        prop_assume!(o > 0 && o < n);
        let s = n - o;
        let mut cfg = tiny_model(5);
        cfg.embed.token_dim = 6;
        cfg.copula.layers = copula_layers;
        cfg.scheduler.mode = PermutationMode::Random;
        cfg.scheduler.window = WindowPolicy::Global;
        cfg.encoder = EncoderConfig::Perceiver(PerceiverConfig {
            num_latents: l,
            latent_dim: 6,
            attention_layers: layers,
            self_heads: heads,
            cross_heads: heads,
            decoder_heads: heads,
            dropout: 0.0,
        });
        let (m, store) = Model::new(&cfg, 2, seed).unwrap();
        let plan = m.plan(&f, seed).unwrap();
        let mut g = Graph::inference();
        m.nll(&mut g, &store, &f, &plan, &mut Ctx::eval()).unwrap();
        let (h, l, ly) = (heads as u64, l as u64, layers as u64);
        prop_assert_eq!(g.ledger().encoder_cross_scores, h * (l * o + l * n));
        prop_assert_eq!(g.ledger().encoder_self_scores, h * ly * l * l);
        let ch = cfg.copula.heads as u64;
        prop_assert_eq!(g.ledger().decoder_scores, copula_layers as u64 * ch * (s * (s - 1) / 2 + s * o));
    }
}

#[test]
fn global_encoder_is_quadratic_in_tokens() {
    let f = random_mask_frame(&mut rng(3), 3, 5, 0.6);
    let mut cfg = tiny_model(5);
    cfg.encoder = EncoderConfig::Global(tiny_global());
    let (m, store) = Model::new(&cfg, 3, 0).unwrap();
    let plan = m.plan(&f, 0).unwrap();
    let mut g = Graph::inference();
    m.nll(&mut g, &store, &f, &plan, &mut Ctx::eval()).unwrap();
    let n = f.points.len() as u64;
    assert_eq!(g.ledger().encoder_self_scores, 2 * 2 * n * n);
    assert_eq!(g.ledger().encoder_cross_scores, 0);
}

#[test]
fn small_sweep_orders_variants_and_round_trips() {
    let mut model = tiny_model(5);
    model.scheduler.window = WindowPolicy::Local(2);
    let mut sc = ScalingConfig::new(model, tiny_global());
    sc.n_variables = 3;
    let values = [4, 8, 16, 32];
    let rows = run_scaling(&sc, SweepAxis::PredLen, &values, &VariantSpec::all()).unwrap();
    assert_eq!(rows.len(), 16);
    for &x in &values {
        let t = |v: &str| rows.iter().find(|r| r.variant == v && r.value == x).unwrap().ledger.decoder_scores;
        assert!(t("perceiver-CDF") <= t("TACTiS"));
        assert!(t("TACTiS-MI") <= t("TACTiS-PE"));
    }
    let a = fit_slope(&rows, "perceiver-CDF", SweepAxis::PredLen).unwrap();
    let b = fit_slope(&rows, "TACTiS", SweepAxis::PredLen).unwrap();
    assert!(a < b, "{a} vs {b}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_scaling_csv(&rows, &p).unwrap();
    let back = read_scaling_csv(&p).unwrap();
    assert_eq!(back.len(), rows.len());
    for (x, y) in back.iter().zip(&rows) {
        assert_eq!(x.ledger.total(), y.ledger.total());
        assert_eq!((x.variant.as_str(), x.value), (y.variant.as_str(), y.value));
    }
}
