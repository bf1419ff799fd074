use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::params::ParamStore;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with uniform noise; norm gains stay near one.
fn randomize(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut r = rng(seed);
    let names = store.names().to_vec();
    for (name, v) in names.iter().zip(store.values_mut()) {
        *v = Tensor::uniform(v.shape(), -scale, scale, &mut r);
        if name.ends_with("_g") {
            *v = v.map(|x| 1.0 + 0.2 * x);
        }
    }
}

fn run<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Tensor
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &p, &vars).unwrap();
    tape.value(y).clone()
}

/// Worst finite-difference error over the parameters and data inputs.
fn grad_error<F>(store: &ParamStore, inputs: &[Tensor], probes: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut all: Vec<Tensor> = store.values().to_vec();
    all.extend_from_slice(inputs);
    let opts = GradCheckOptions {
        max_probes: Some(probes),
        ..Default::default()
    };
    let errs = check_gradients(&all, &opts, |tape, vars| {
        let p = Bound::from_vars(vars[..np].to_vec());
        f(tape, &p, &vars[np..])
    })
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        if *e > 1e-2 {
            eprintln!("{} {e}", store.names().get(i).map(String::as_str).unwrap_or("input"));
        }
    }
    errs.into_iter().fold(0.0, f64::max)
}

fn distinct_channels(n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, c, h, w], |i| ((i / (h * w)) % c) as f32)
}

#[test]
fn channel_split_ranges() {
    let cs = ChannelSplit::new(4, 2).unwrap();
    assert_eq!((cs.d_h1, cs.d_h2, cs.d_l), (1, 1, 2));
    let z = distinct_channels(1, 4, 2, 2);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (a, b, l) = channel_split(&mut tape, zv, &cs).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(b).data().iter().all(|&v| v == 1.0));
    assert_eq!(tape.shape(l), &[1, 2, 2, 2]);
    assert_eq!(&tape.value(l).data()[..4], &[2.0; 4]);
    assert_eq!(&tape.value(l).data()[4..], &[3.0; 4]);
    let back = tape.concat_channels(&[a, b, l]).unwrap();
    assert_eq!(tape.value(back), &z);
}

#[test]
fn channel_split_degenerate_and_errors() {
    let cs = ChannelSplit::new(6, 6).unwrap();
    assert_eq!(cs.d_l, 0);
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
    let (_, _, l) = channel_split(&mut tape, zv, &cs).unwrap();
    assert_eq!(tape.shape(l), &[1, 0, 2, 2]);
    let wrong = tape.constant(Tensor::zeros(&[1, 5, 2, 2]));
    assert!(matches!(channel_split(&mut tape, wrong, &cs), Err(Error::Shape { .. })));
    assert!(ChannelSplit::new(4, 5).is_err());
}

#[test]
fn split_from_fraction_and_heads() {
    let cs = ChannelSplit::from_fraction(256, Fraction::new(5, 8)).unwrap();
    assert_eq!((cs.d_h, cs.d_l), (160, 96));
    assert_eq!(cs.heads(), 3);
    assert_eq!(heads_for(336), 8);
    assert_eq!(heads_for(16), 1);
    assert_eq!(norm_groups(64), 8);
    assert_eq!(norm_groups(32), 8);
    assert_eq!(norm_groups(16), 4);
    assert_eq!(norm_groups(8), 2);
    assert_eq!(norm_groups(12), 2);
    assert_eq!(norm_groups(3), 1);
}

#[test]
fn high_mixer_zero_params_give_zero_and_keep_shapes() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let hm = HighMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 3, 5);
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a = tape.constant(Tensor::randn(&[2, 3, 8, 8], &mut r));
    let b = tape.constant(Tensor::randn(&[2, 5, 8, 8], &mut r));
    let (y1, y2) = hm.forward(&mut tape, &p, a, b).unwrap();
    let (y1, y2) = (y1.unwrap(), y2.unwrap());
    assert_eq!(tape.shape(y1), &[2, 3, 8, 8]);
    assert_eq!(tape.shape(y2), &[2, 5, 8, 8]);
    assert!(tape.value(y1).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(y2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn high_mixer_rejects_odd_extent() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let hm = HighMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 2, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let b = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(hm.forward(&mut tape, &p, a, b).is_err());
}

#[test]
fn high_mixer_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let hm = HighMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 2, 2);
    randomize(&mut store, 3, 0.5);
    let inputs = [
        Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r),
        Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r),
    ];
    let err = grad_error(&store, &inputs, 24, |tape, p, v| {
        let (a, b) = hm.forward(tape, p, v[0], v[1])?;
        tape.concat_channels(&[a.unwrap(), b.unwrap()])
    });
    assert!(err < 1e-2, "{err}");
}

#[test]
fn low_mixer_single_token_attends_to_itself() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let lm = LowMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::randn(&[2, 4, 2, 2], &mut r));
    let (y, attn) = lm.forward(&mut tape, &p, z).unwrap();
    assert_eq!(tape.shape(attn), &[2, 1, 1]);
    assert!(tape.value(attn).data().iter().all(|&a| a == 1.0));
    assert_eq!(tape.shape(y), &[2, 4, 2, 2]);
}

#[test]
fn attention_rows_are_stochastic() {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let lm = LowMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 8, 2);
    randomize(&mut store, 6, 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::randn(&[2, 8, 8, 8], &mut r));
    let (_, attn) = lm.forward(&mut tape, &p, z).unwrap();
    let a = tape.value(attn);
    assert_eq!(a.shape(), &[4, 16, 16]);
    for row in a.data().chunks(16) {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let mhsa = Mhsa::new(&mut ParamBuilder::new(&mut store, &mut r), 8, 2, false);
    randomize(&mut store, 8, 0.7);
    let t = 12;
    let x = Tensor::randn(&[1, 8, 1, t], &mut r);
    let perm: Vec<usize> = vec![5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
    let permute = |x: &Tensor, perm: &[usize], inverse: bool| {
        Tensor::from_fn(x.shape(), |i| {
            let (c, j) = (i / t, i % t);
            let src = if inverse {
                perm.iter().position(|&p| p == j).unwrap()
            } else {
                perm[j]
            };
            x.data()[c * t + src]
        })
    };
    let f = |x: &Tensor| {
        run(&store, std::slice::from_ref(x), |tape, p, v| {
            Ok(mhsa.forward(tape, p, v[0])?.0)
        })
    };
    let direct = f(&x);
    let via_perm = permute(&f(&permute(&x, &perm, false)), &perm, true);
    assert!(direct.max_abs_diff(&via_perm) < 1e-5);
}

#[test]
fn low_mixer_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let lm = LowMixer::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 2);
    randomize(&mut store, 10, 0.8);
    let inputs = [Tensor::uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut r)];
    let err = grad_error(&store, &inputs, 24, |tape, p, v| Ok(lm.forward(tape, p, v[0])?.0));
    assert!(err < 1e-2, "{err}");
}

#[test]
fn fuse_identity_path_and_shape() {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let fuse = Fuse::new(&mut ParamBuilder::new(&mut store, &mut r), 6);
    for (name, v) in store.names().to_vec().iter().zip(store.values_mut()) {
        *v = if name.ends_with("fc_w") {
            Tensor::from_fn(&[6, 6, 1, 1], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 })
        } else {
            Tensor::zeros(v.shape())
        };
    }
    let parts = [
        Tensor::randn(&[2, 1, 4, 4], &mut r),
        Tensor::randn(&[2, 2, 4, 4], &mut r),
        Tensor::randn(&[2, 3, 4, 4], &mut r),
    ];
    let y = run(&store, &parts, |tape, p, v| {
        fuse.forward(tape, p, &[Some(v[0]), Some(v[1]), Some(v[2])])
    });
    let yc = run(&store, &parts, |tape, _, v| tape.concat_channels(v));
    assert_eq!(y.shape(), &[2, 6, 4, 4]);
    assert!(y.max_abs_diff(&yc) < 1e-6);
}

#[test]
fn fuse_rejects_spatial_mismatch() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let fuse = Fuse::new(&mut ParamBuilder::new(&mut store, &mut r), 4);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(
        fuse.forward(&mut tape, &p, &[Some(a), None, Some(b)]),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn fuse_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let fuse = Fuse::new(&mut ParamBuilder::new(&mut store, &mut r), 4);
    randomize(&mut store, 14, 0.6);
    let inputs = [
        Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut r),
        Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r),
    ];
    let err = grad_error(&store, &inputs, 32, |tape, p, v| {
        fuse.forward(tape, p, &[Some(v[0]), None, Some(v[1])])
    });
    assert!(err < 1e-2, "{err}");
}

fn iformer(d: usize, d_h: usize, embed: usize, seed: u64) -> (ParamStore, IFormerBlock) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let block = IFormerBlock::new(
        &mut ParamBuilder::new(&mut store, &mut r),
        ChannelSplit::new(d, d_h).unwrap(),
        embed,
    );
    (store, block)
}

#[test]
fn iformer_block_is_identity_at_init() {
    let (store, block) = iformer(16, 8, 16, 15);
    let mut r = rng(16);
    let z = Tensor::randn(&[2, 16, 8, 8], &mut r);
    let temb = sinusoidal_embedding(&[3, 900], 16);
    let out = run(&store, &[z.clone(), temb], |tape, p, v| {
        block.forward(tape, p, v[0], v[1])
    });
    assert_eq!(out, z);
}

#[test]
fn iformer_block_preserves_shape_and_depends_on_t() {
    let (mut store, block) = iformer(16, 8, 16, 17);
    randomize(&mut store, 18, 0.5);
    let mut r = rng(19);
    let z = Tensor::randn(&[2, 16, 8, 8], &mut r);
    let f = |ts: &[usize]| {
        run(&store, &[z.clone(), sinusoidal_embedding(ts, 16)], |tape, p, v| {
            block.forward(tape, p, v[0], v[1])
        })
    };
    let (a, b) = (f(&[0, 0]), f(&[999, 999]));
    assert_eq!(a.shape(), &[2, 16, 8, 8]);
    let l2: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    assert!(l2 > 0.0);
}

#[test]
fn iformer_block_without_low_branch_has_no_low_params() {
    let (store, block) = iformer(8, 8, 8, 20);
    assert!(block.low_heads().is_none());
    assert!(store.names().iter().all(|n| !n.contains("/low/")));
}

#[test]
fn iformer_block_gradients() {
    let (mut store, block) = iformer(8, 4, 8, 21);
    randomize(&mut store, 22, 0.5);
    let mut r = rng(23);
    let inputs = [
        Tensor::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut r),
        sinusoidal_embedding(&[37], 8),
    ];
    let err = grad_error(&store, &inputs, 16, |tape, p, v| block.forward(tape, p, v[0], v[1]));
    assert!(err < 1e-2, "{err}");
}

#[test]
fn res_block_identity_and_shapes() {
    let mut store = ParamStore::new();
    let mut r = rng(24);
    let same = ResBlock::new(&mut ParamBuilder::new(&mut store, &mut r).scope("a"), 8, 8, 16);
    let wider = ResBlock::new(&mut ParamBuilder::new(&mut store, &mut r).scope("b"), 8, 16, 16);
    let x = Tensor::randn(&[2, 8, 4, 4], &mut r);
    let temb = sinusoidal_embedding(&[1, 2], 16);
    let y = run(&store, &[x.clone(), temb.clone()], |tape, p, v| {
        same.forward(tape, p, v[0], v[1])
    });
    assert_eq!(y, x);
    let y = run(&store, &[x, temb], |tape, p, v| wider.forward(tape, p, v[0], v[1]));
    assert_eq!(y.shape(), &[2, 16, 4, 4]);
    assert_eq!(wider.out_channels(), 16);
}

#[test]
fn res_block_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(25);
    let block = ResBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 8, 8);
    randomize(&mut store, 26, 0.5);
    let inputs = [
        Tensor::uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut r),
        sinusoidal_embedding(&[500], 8),
    ];
    let err = grad_error(&store, &inputs, 24, |tape, p, v| block.forward(tape, p, v[0], v[1]));
    assert!(err < 1e-2, "{err}");
}

#[test]
fn attention_block_identity_at_init() {
    let mut store = ParamStore::new();
    let mut r = rng(27);
    let block = AttentionBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 8);
    let x = Tensor::randn(&[1, 8, 2, 2], &mut r);
    assert_eq!(
        run(&store, std::slice::from_ref(&x), |tape, p, v| block
            .forward(tape, p, v[0])),
        x
    );
}

#[test]
fn param_names_follow_block_paths() {
    let mut store = ParamStore::new();
    let mut r = rng(28);
    let mut pb = ParamBuilder::new(&mut store, &mut r);
    IFormerBlock::new(&mut pb.scope("enc1").scope("0"), ChannelSplit::new(8, 4).unwrap(), 8);
    assert!(store.id("blocks/enc1/0/high1/fc_w").is_some());
    assert!(store.id("blocks/enc1/0/high2/dconv_w").is_some());
    assert!(store.id("blocks/enc1/0/low/q_w").is_some());
    assert!(store.id("blocks/enc1/0/fuse/fc_w").is_some());
}

#[test]
fn sinusoidal_embedding_rows() {
    let e = sinusoidal_embedding(&[0, 10], 8);
    assert_eq!(e.shape(), &[2, 8]);
    assert_eq!(&e.data()[..8], &[0., 0., 0., 0., 1., 1., 1., 1.]);
    assert!((e.data()[8] - 10f32.sin()).abs() < 1e-6);
}
