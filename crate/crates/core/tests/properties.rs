use polyprune::analysis::{hamming, hamming_matrix};
use polyprune::dyn_sparse::{ds_gate, init_ds, solve_ds_params, SparsityGrid};
use polyprune::encoder::{
    count_params, encoder_sparsity, CompactEncoder, ComponentWeights, Encoder, GateDims, GateSet, ModelConfig,
};
use polyprune::grad_prune::{select_threshold, ImportanceTable, SHARED};
use polyprune::l0::{diversity_loss, HardConcrete, PriorMatrix};
use polyprune::rng::rng_for;
use polyprune::tensor::Tensor;
use proptest::prelude::*;

const DIMS: GateDims = GateDims { n_layers: 2, n_heads: 3, ffn_dim: 5, model_dim: 4 };

fn mask() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), DIMS.n_gates())
}

fn gates(m: &[bool]) -> GateSet {
    GateSet::from_mask(DIMS, m).unwrap()
}

proptest! {
    #[test]
    fn hamming_is_a_metric(a in mask(), b in mask(), c in mask()) {
        let (a, b, c) = (gates(&a), gates(&b), gates(&c));
        prop_assert_eq!(hamming(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(hamming(&a, &b).unwrap(), hamming(&b, &a).unwrap());
        prop_assert!(hamming(&a, &c).unwrap() <= hamming(&a, &b).unwrap() + hamming(&b, &c).unwrap() + 1e-15);
        let d = hamming(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d == 0.0, a == b);
    }

    #[test]
    fn hamming_matrix_is_symmetric(ms in prop::collection::vec(mask(), 1..6)) {
        let named: Vec<(String, GateSet)> = ms.iter().enumerate().map(|(i, m)| (format!("l{i}"), gates(m))).collect();
        let h = hamming_matrix(&named).unwrap();
        for i in 0..ms.len() {
            prop_assert_eq!(h.get(i, i), 0.0);
            for j in 0..ms.len() {
                prop_assert_eq!(h.get(i, j), h.get(j, i));
            }
        }
    }

    #[test]
    fn ds_gate_is_a_monotone_ramp(t_hat in 0.01f64..=1.0, frac in 0.01f64..=1.0, t in 0.0f64..=1.0) {
        let hc = HardConcrete::default();
        let delta = frac * t_hat;
        let (a, th) = solve_ds_params(t_hat, delta, &hc).unwrap();
        let g = ds_gate(&hc, a, th, t);
        prop_assert!((0.0..=1.0).contains(&g));
        if t >= t_hat {
            prop_assert_eq!(g, 1.0);
        }
        if t <= t_hat - delta {
            prop_assert_eq!(g, 0.0);
        }
        prop_assert!(ds_gate(&hc, a, th, (t + 0.01).min(1.0)) >= g);
    }

    #[test]
    fn ds_grid_subnetworks_nest(scores in prop::collection::vec(0.0f64..1.0, DIMS.n_gates())) {
        let table = ImportanceTable::new(DIMS, scores, SHARED, 1).unwrap();
        let grid = SparsityGrid::default();
        let ds = init_ds(&[table], &ComponentWeights::for_dims(DIMS), &grid, &HardConcrete::default()).unwrap();
        let nets: Vec<GateSet> = grid.sizes().iter().map(|&t| ds.subnetwork_at(t, None).unwrap()).collect();
        prop_assert!(nets.iter().all(GateSet::is_hard));
        // sizes ascend from the empty network to the full one
        for pair in nets.windows(2) {
            prop_assert!(pair[0].is_subset_of(&pair[1]));
        }
    }

    #[test]
    fn threshold_selection_meets_budget_and_nests(
        scores in prop::collection::vec(0.0f64..1.0, DIMS.n_gates()),
        t1 in 0.05f64..=1.0,
        t2 in 0.05f64..=1.0,
    ) {
        let table = ImportanceTable::new(DIMS, scores, SHARED, 1).unwrap();
        let w = ComponentWeights::for_dims(DIMS);
        let tol = w.max_weight() / w.encoder_total(DIMS);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = select_threshold(&table, &w, lo).unwrap();
        let b = select_threshold(&table, &w, hi).unwrap();
        prop_assert!((1.0 - encoder_sparsity(&a, &w) - lo).abs() <= tol + 1e-12);
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn hard_concrete_samples_stay_in_unit_interval(alpha in -20.0f64..20.0, u in 1e-9f64..1.0 - 1e-9) {
        let hc = HardConcrete::default();
        let g = hc.sample_gate(alpha, u).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
        let p = hc.l0_prob(alpha);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(hc.l0_prob(alpha + 0.5) >= p);
    }

    #[test]
    fn diversity_loss_is_nonnegative_and_ignores_same_family(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 2..5),
    ) {
        let l = rows.len();
        let langs: Vec<String> = (0..l).map(|i| format!("l{i}")).collect();
        let one_family = vec!["f".to_string(); l];
        let distinct: Vec<String> = (0..l).map(|i| format!("f{i}")).collect();
        let g = Tensor::matrix(l, 6, rows.concat()).unwrap();
        prop_assert_eq!(diversity_loss(&g, &PriorMatrix::from_families(&langs, &one_family).unwrap()).unwrap(), 0.0);
        prop_assert!(diversity_loss(&g, &PriorMatrix::from_families(&langs, &distinct).unwrap()).unwrap() >= 0.0);
    }

    #[test]
    fn pruning_never_adds_parameters(a in mask(), flip in 0..DIMS.n_gates()) {
        let cfg = ModelConfig { n_layers: 2, n_heads: 3, model_dim: 4, ffn_dim: 5, vocab_size: 11, max_seq_len: 8, dropout: 0.0 };
        let g = gates(&a);
        let mut off = a.clone();
        off[flip] = false;
        let before = count_params(&cfg, &g).unwrap();
        let after = count_params(&cfg, &gates(&off)).unwrap();
        prop_assert!(after.total <= before.total);
        prop_assert!(after.encoder <= before.encoder && after.embedding <= before.embedding);
    }

    #[test]
    fn gate_files_round_trip(a in mask()) {
        let g = gates(&a);
        let mut bits = Vec::new();
        g.write_bitset(&mut bits).unwrap();
        prop_assert_eq!(&GateSet::read_bitset(bits.as_slice()).unwrap(), &g);
        let mut text = Vec::new();
        g.write_text(&mut text).unwrap();
        prop_assert_eq!(&GateSet::read_text(text.as_slice(), DIMS).unwrap(), &g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compacted_model_matches_gated_model(seed in any::<u64>(), m in prop::collection::vec(any::<bool>(), 36)) {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, model_dim: 8, ffn_dim: 12, vocab_size: 15, max_seq_len: 8, dropout: 0.0 };
        let enc = Encoder::init(&cfg, &mut rng_for(seed, "prop-compact")).unwrap();
        let g = GateSet::from_mask(enc.dims(), &m).unwrap();
        let seqs = vec![vec![1, 4, 7, 2], vec![3, 14, 9, 9, 5, 1, 2]];
        let d = CompactEncoder::from_gated(&enc, &g).unwrap().logits(&seqs).unwrap().max_abs_diff(&enc.logits(Some(&g), &seqs).unwrap());
        prop_assert!(d <= 1e-10, "{}", d);
    }
}
