use physaug::autodiff::{finite_difference_gradient, Graph};
use physaug::nbody::*;
use physaug::network::{Activation, MlpNetwork, MlpSpec};
use physaug::properties::{Paradigm, PropertyKind, PropertyModel};
use proptest::prelude::*;

fn zero_force_model() -> PropertyModel {
    let mut m = PropertyModel::new(
        Paradigm::Pal,
        PropertyKind::TimeIndependence,
        1.0,
        &physaug::properties::NetworkShape {
            hidden: vec![8, 8],
            activation: Activation::Tanh,
        },
        5,
    )
    .unwrap();
    m.network_mut("f1").unwrap().zero_output_layer();
    m.network_mut("f2").unwrap().zero_output_layer();
    m
}

fn state_strategy() -> impl Strategy<Value = NBodyState> {
    (2usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), n),
            prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), n),
        )
            .prop_map(|(p, v)| {
                NBodyState::new(
                    p.into_iter().map(|(a, b)| [a, b]).collect(),
                    v.into_iter().map(|(a, b)| [a, b]).collect(),
                    0.0,
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn momentum_is_conserved(init in state_strategy(), law in 0usize..3) {
        let force_law = [ForceLaw::square(), ForceLaw::Power { coefficient: -0.5, exponent: 1.0 }, ForceLaw::zero()][law];
        let cfg = NBodySimConfig { n_bodies: init.n_bodies(), dt: 0.01, n_steps: 20, force_law, mass: 1.0 };
        let traj = match simulate(&cfg, &init) {
            Ok(t) => t,
            Err(physaug::Error::Singularity { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let p0 = init.total_momentum();
        for s in &traj.states {
            let p = s.total_momentum();
            prop_assert!((p[0] - p0[0]).abs() <= 1e-12 && (p[1] - p0[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn pair_forces_are_antisymmetric(a in (-5.0..5.0f64, -5.0..5.0f64), b in (-5.0..5.0f64, -5.0..5.0f64)) {
        prop_assume!(a != b);
        let f = pairwise_force([a.0, a.1], [b.0, b.1], &ForceLaw::square()).unwrap();
        let g = pairwise_force([b.0, b.1], [a.0, a.1], &ForceLaw::square()).unwrap();
        prop_assert_eq!(f, [-g[0], -g[1]]);
    }
}

#[test]
fn reference_rollout_invariants() {
    let cfg = NBodySimConfig::reference();
    let init = reference_initial_state();
    let traj = simulate(&cfg, &init).unwrap();
    let p0 = init.total_momentum();
    let c0 = init.center_of_mass();
    let n = init.n_bodies() as f64;
    for (l, s) in traj.states.iter().enumerate() {
        let p = s.total_momentum();
        assert!((p[0] - p0[0]).abs() <= 1e-12 && (p[1] - p0[1]).abs() <= 1e-12);
        let c = s.center_of_mass();
        let t = l as f64 * cfg.dt;
        assert!((c[0] - c0[0] - t * p0[0] / n).abs() <= 1e-10);
        assert!((c[1] - c0[1] - t * p0[1] / n).abs() <= 1e-10);
    }
}

#[test]
fn one_step_time_reversal() {
    let cfg = NBodySimConfig::reference();
    let init = reference_initial_state();
    let one = simulate(&NBodySimConfig { n_steps: 1, ..cfg.clone() }, &init).unwrap();
    let s1 = one.last();
    let dz = dynamics_rhs(s1, &cfg.force_law).unwrap();
    let z1 = s1.to_z();
    let back: Vec<f64> = z1.iter().zip(&dz).map(|(z, d)| z - cfg.dt * d).collect();
    let z0 = init.to_z();
    for k in 0..2 * init.n_bodies() {
        assert!((back[k] - z0[k]).abs() <= 1e-2, "coordinate {k}");
    }
}

#[test]
fn zero_networks_fly_free() {
    let cfg = NBodySimConfig::reference();
    let init = reference_initial_state();
    let free = simulate(&NBodySimConfig { force_law: ForceLaw::zero(), ..cfg.clone() }, &init).unwrap();
    let model = zero_force_model();
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let ro = learned_rollout(&mut g, &bound, &init, cfg.n_steps, cfg.dt).unwrap();
    let learned = ro.trajectory(&g, &cfg);
    for (a, b) in learned.states.iter().zip(&free.states) {
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert!((p[0] - q[0]).abs() <= 1e-12 && (p[1] - q[1]).abs() <= 1e-12);
        }
    }
}

#[test]
fn time_independent_force_is_shared_across_blocks() {
    let model = zero_force_model();
    let mut m = model.clone();
    *m.network_mut("f1").unwrap() =
        MlpNetwork::init(MlpSpec::new(vec![1, 8, 8, 1], Activation::Tanh, 9)).unwrap();
    let mut g = Graph::new();
    let bound = m.bind_frozen(&mut g);
    let r = g.constant(ndarray::array![[0.3], [1.7], [2.2]]);
    let a = bound.magnitude(&mut g, r, 0.0).unwrap().magnitude;
    let b = bound.magnitude(&mut g, r, 0.62).unwrap().magnitude;
    assert_eq!(g.value(a), g.value(b));
}

/// Endpoint position MAE of a rollout driven by `net(r)`.
fn endpoint_loss(net: &MlpNetwork, g: &mut Graph) -> physaug::Result<(physaug::autodiff::NodeId, LearnedOnly)> {
    let cfg = NBodySimConfig::reference();
    let init = reference_initial_state();
    let target = simulate(&cfg, &init)?.last().clone();
    let law = LearnedOnly(net.bind(g));
    let ro = learned_rollout(g, &law, &init, cfg.n_steps, cfg.dt)?;
    let tp = g.constant(positions_matrix(&target));
    let d = g.sub(*ro.positions.last().expect("steps"), tp)?;
    let a = g.abs(d)?;
    Ok((g.mean(a)?, law))
}

#[test]
fn endpoint_gradient_matches_finite_differences() {
    let mut net = MlpNetwork::init(MlpSpec::new(vec![1, 8, 8, 1], Activation::Tanh, 2)).unwrap();
    let p: Vec<f64> = net.flat_params().iter().map(|v| v * 0.05).collect();
    net.set_flat_params(&p).unwrap();

    let mut g = Graph::new();
    let (root, law) = endpoint_loss(&net, &mut g).unwrap();
    g.backward(root).unwrap();
    let grad = law.0.gradient(&g);

    // A first-layer and an output-layer weight.
    for idx in [3usize, p.len() - 4] {
        let fd = finite_difference_gradient(
            |q| {
                let mut n = net.clone();
                let mut pp = p.clone();
                pp[idx] = q[0];
                n.set_flat_params(&pp)?;
                let mut g = Graph::new();
                let (r, _) = endpoint_loss(&n, &mut g)?;
                Ok(g.scalar(r))
            },
            &[p[idx]],
            1e-6,
        )
        .unwrap()[0];
        let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs());
        assert!(rel <= 1e-3, "param {idx}: autodiff {} fd {fd}", grad[idx]);
    }
}

/// Force magnitude from a single network of `r`.
struct LearnedOnly(physaug::network::BoundMlp);

impl PairForce for LearnedOnly {
    fn magnitude(&self, g: &mut Graph, r: physaug::autodiff::NodeId, _t: f64) -> physaug::Result<ForceEval> {
        Ok(ForceEval {
            magnitude: self.0.forward(g, r)?,
            residual: None,
        })
    }
}

#[test]
fn singular_rollout_is_an_error() {
    let init = NBodyState::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![[1.0, 0.0], [0.0, 0.0]], 0.0).unwrap();
    let mut g = Graph::new();
    let res = learned_rollout(&mut g, &SquareLaw { residual: None }, &init, 3, 1.0);
    assert!(matches!(res, Err(physaug::Error::Singularity { step: 1, i: 0, j: 1 })));
}
