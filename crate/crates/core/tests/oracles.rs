//! Forward passes frozen against values recomputed outside this crate with a
//! plain dense-algebra implementation from the same seeded parameters.

use skillplan::encoders::ObservationEncoder;
use skillplan::numerics::{ParamStore, Rng, Tape, Tensor};
use skillplan::{invdyn, skill, PlannerConfig};

const TOL: f64 = 1e-12;

fn close(got: &[f64], want: &[f64]) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() < TOL, "coordinate {i}: {g} vs {w}");
    }
}

struct Fixture {
    cfg: PlannerConfig,
    store: ParamStore,
    obs: Tensor,
    lang: Tensor,
    z: Tensor,
    raw: Tensor,
    s_next: Tensor,
}

fn fixture() -> Fixture {
    let cfg = PlannerConfig::default();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(42);
    skill::init_predictor(&mut store, &cfg, &mut rng);
    skill::init_embedder(&mut store, &cfg, &mut rng);
    invdyn::init(&mut store, &cfg, "toyworld", &mut rng);
    let mut r = Rng::new(5);
    Fixture {
        obs: r.normal_tensor(&[2, 32], 0.5),
        lang: r.normal_tensor(&[2, 32], 0.5),
        z: r.normal_tensor(&[2, 16], 1.0),
        raw: r.normal_tensor(&[2, 16], 1.0),
        s_next: r.normal_tensor(&[2, 32], 0.5),
        cfg,
        store,
    }
}

#[test]
fn observation_encoder_seed_7_basis_vector() {
    let enc = ObservationEncoder::new(16, 32, 7);
    let mut e0 = vec![0.0; 16];
    e0[0] = 1.0;
    let out = enc.encode(&e0).unwrap();
    close(
        &out.data()[..6],
        &[
            0.06421260727980274,
            0.04050726478973448,
            -0.14159670651691986,
            0.24964243370728048,
            -0.20568538667653694,
            -0.09399134652166215,
        ],
    );
}

#[test]
fn skill_predictor_seed_42() {
    let f = fixture();
    let mut t = Tape::new();
    let (o, l) = (t.constant(f.obs.clone()), t.constant(f.lang.clone()));
    let z = skill::predict_skill(&mut t, &f.store, &f.cfg, o, l).unwrap();
    let z = t.value(z);
    close(
        &z.row(0)[..6],
        &[
            0.21150892849836964,
            1.4255077917143566,
            0.34694819737234783,
            0.16417607634098885,
            -0.4042752102796253,
            -0.8637085049519084,
        ],
    );
    close(
        &z.row(1)[..6],
        &[
            -1.0761430109767331,
            -0.7033795523163808,
            -0.32000646185297654,
            -0.1166113374283473,
            0.1624210502589823,
            1.3032445466479954,
        ],
    );
}

#[test]
fn skill_embedder_seed_42() {
    let f = fixture();
    let mut t = Tape::new();
    let z = t.constant(f.z.clone());
    let c = skill::skill_embed(&mut t, &f.store, z).unwrap();
    close(
        &t.value(c).row(0)[..6],
        &[
            1.4714454873112894,
            0.9806621782066196,
            -0.3915202081976633,
            0.8651905176438262,
            0.2802182844920156,
            -1.120234384468989,
        ],
    );
}

#[test]
fn inverse_dynamics_seed_42() {
    let f = fixture();
    let a = invdyn::infer_actions(&f.store, &f.cfg, "toyworld", &f.obs, &f.s_next, &f.raw).unwrap();
    close(
        a.data(),
        &[
            -0.18167907475542686,
            -0.05767218691680925,
            0.2356109566791104,
            -0.0894491547541659,
            -0.17929592779326325,
            0.03139322262227914,
            -0.25567786604248244,
            0.03267434885464009,
        ],
    );
}
