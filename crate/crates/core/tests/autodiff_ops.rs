use paec::autodiff::{Adam, AdamState, ConvGeom, ParamStore, Tape, Tensor, Var};
use paec::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Scalar probe `sum(f(inputs) * w)` for a fixed random `w`.
fn probe(
    make: &dyn Fn() -> Tape<f64>,
    inputs: &[Tensor<f64>],
    f: &Build,
    seed: u64,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = make();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, tape.dims(out));
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };
    let value = tape.scalar_value(loss);
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|v| tape.input_grad(*v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    (value, grads)
}

fn gradcheck(inputs: Vec<Tensor<f64>>, f: &Build) {
    gradcheck_on(&Tape::new, inputs, f)
}

fn gradcheck_on(make: &dyn Fn() -> Tape<f64>, inputs: Vec<Tensor<f64>>, f: &Build) {
    let seed = 99;
    let (_, grads) = probe(make, &inputs, f, seed);
    let eps = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        assert_eq!(grads[i].len(), t.len(), "input {i} has no gradient");
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data[j] += eps;
            let mut minus = inputs.clone();
            minus[i].data[j] -= eps;
            let fd = (probe(make, &plus, f, seed).0 - probe(make, &minus, f, seed).0) / (2.0 * eps);
            let an = grads[i][j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-5, "input {i} coord {j}: analytic {an}, numeric {fd}");
        }
    }
}

fn geom(kt: usize, kf: usize, stride_f: usize, dilation_t: usize) -> ConvGeom {
    ConvGeom {
        kt,
        kf,
        stride_f,
        dilation_t,
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in [geom(2, 3, 2, 1), geom(3, 1, 1, 2), geom(1, 1, 1, 1)] {
        let f_in = 9;
        let inputs = vec![
            rand_tensor(&mut rng, &[6, 2, f_in]),
            rand_tensor(&mut rng, &[3, 2, g.kt, g.kf]),
            rand_tensor(&mut rng, &[3]),
        ];
        gradcheck(inputs, &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), g));
    }
}

#[test]
fn tconv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (f_in, f_out) in [(4, 9), (9, 19), (39, 80)] {
        let g = geom(2, 3, 2, 1);
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 2, f_in]),
            rand_tensor(&mut rng, &[2, 2, 2, 3]),
            rand_tensor(&mut rng, &[2]),
        ];
        gradcheck(inputs, &move |t, v| t.tconv2d(v[0], v[1], Some(v[2]), g, f_out));
    }
}

#[test]
fn linear_and_elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    gradcheck(
        vec![
            rand_tensor(&mut rng, &[3, 1, 7]),
            rand_tensor(&mut rng, &[5, 7]),
            rand_tensor(&mut rng, &[5]),
        ],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
    );
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    gradcheck(vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    gradcheck(vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    gradcheck(vec![a.clone(), b.clone()], &|t, v| t.magnitude(v[0], v[1]));
    gradcheck(vec![a.clone()], &|t, v| t.sigmoid(v[0]));
    gradcheck(vec![a.clone()], &|t, v| t.scale(v[0], -2.5));
    gradcheck(vec![a.clone()], &|t, v| t.sum(v[0]));
    let target: Vec<f64> = b.data.clone();
    gradcheck(vec![a], &move |t, v| t.sq_err_sum(v[0], &target));
}

#[test]
fn activation_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    gradcheck(
        vec![rand_tensor(&mut rng, &[4, 3, 5]), rand_tensor(&mut rng, &[3])],
        &|t, v| t.prelu(v[0], v[1]),
    );
    gradcheck(
        vec![
            rand_tensor(&mut rng, &[6, 3, 2]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
        ],
        &|t, v| t.instance_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    gradcheck(
        vec![rand_tensor(&mut rng, &[3, 2, 4]), rand_tensor(&mut rng, &[3, 1, 4])],
        &|t, v| t.concat(&[v[0], v[1]]),
    );
    gradcheck(vec![rand_tensor(&mut rng, &[3, 2, 4])], &|t, v| {
        t.reshape(v[0], &[3, 8, 1])
    });
    gradcheck(vec![rand_tensor(&mut rng, &[1, 5, 1])], &|t, v| t.tile(v[0], 4));
}

#[test]
fn frozen_instance_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 2, 3]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::filled(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    tape.instance_norm(xv, g, b).unwrap();
    let stats = tape.take_norm_stats();
    gradcheck_on(
        &move || Tape::new().with_frozen_norms(stats.clone()),
        vec![x, rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2])],
        &|t, v| t.instance_norm(v[0], v[1], v[2]),
    );
}

fn plain_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Vec<f64> {
    let (tn, cin, fin) = (x.dims[0], x.dims[1], x.dims[2]);
    let cout = w.dims[0];
    let fo = (fin - g.kf) / g.stride_f + 1;
    let mut out = vec![0.0; tn * cout * fo];
    for t in 0..tn {
        for o in 0..cout {
            for f in 0..fo {
                let mut acc = 0.0;
                for c in 0..cin {
                    for k in 0..g.kt {
                        let lag = (g.kt - 1 - k) * g.dilation_t;
                        if lag > t {
                            continue;
                        }
                        for j in 0..g.kf {
                            acc += w.data[((o * cin + c) * g.kt + k) * g.kf + j]
                                * x.data[((t - lag) * cin + c) * fin + f * g.stride_f + j];
                        }
                    }
                }
                out[(t * cout + o) * fo + f] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for g in [geom(2, 3, 2, 1), geom(3, 1, 1, 5), geom(1, 1, 1, 1)] {
        let x = rand_tensor(&mut rng, &[11, 3, 19]);
        let w = rand_tensor(&mut rng, &[4, 3, g.kt, g.kf]);
        let mut tape = Tape::<f64>::inference();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, g).unwrap();
        let want = plain_conv(&x, &w, g);
        for (a, b) in tape.value(y).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dilated_conv_reads_exact_lags() {
    // Kernel [1, 0, 0] with dilation 5 is a pure 10-frame delay.
    let x = Tensor::new(vec![20, 1, 1], (1..=20).map(f64::from).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, None, geom(3, 1, 1, 5)).unwrap();
    let got = &tape.value(y).data;
    for t in 0..20 {
        let want = if t >= 10 { (t - 9) as f64 } else { 0.0 };
        assert_eq!(got[t], want);
    }
}

#[test]
fn tconv_is_time_reversed_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = geom(2, 3, 2, 1);
    let (tn, cin, cout, fin) = (7, 3, 2, 19);
    let fo = 9;
    let x = rand_tensor(&mut rng, &[tn, cin, fin]);
    let y = rand_tensor(&mut rng, &[tn, cout, fo]);
    let w = rand_tensor(&mut rng, &[cout, cin, 2, 3]);

    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let cx = tape.conv2d(xv, wv, None, g).unwrap();
    let lhs: f64 = tape.value(cx).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();

    // Transposed conv weights are [Cin_t, Cout_t, kt, kf] = [cout, cin, ..].
    let rev = |t: &Tensor<f64>| {
        let per = t.len() / t.dims[0];
        let data = t.data.chunks(per).rev().flatten().copied().collect();
        Tensor::new(t.dims.clone(), data).unwrap()
    };
    let mut tape = Tape::<f64>::inference();
    let yv = tape.constant(rev(&y));
    let wv = tape.constant(w);
    let ty = tape.tconv2d(yv, wv, None, g, fin).unwrap();
    let back = rev(tape.value(ty));
    let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn gated_conv_example_values() {
    // feature = 2x, gate input 0 -> sigmoid 0.5: output == x.
    let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(x);
    let wf = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let wg = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap());
    let f = tape.conv2d(xv, wf, None, ConvGeom::pointwise()).unwrap();
    let g = tape.conv2d(xv, wg, None, ConvGeom::pointwise()).unwrap();
    let s = tape.sigmoid(g).unwrap();
    let out = tape.mul(f, s).unwrap();
    assert_eq!(tape.value(out).data, vec![3.0]);
}

#[test]
fn sum_of_weighted_input_has_weight_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .register("w", Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let wv = tape.param(&store, w);
    let p = tape.mul(wv, x).unwrap();
    let loss = tape.sum(p).unwrap();
    assert_eq!(tape.scalar_value(loss), 16.5);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::filled(&[3], 1.0));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::filled(&[3], 1.0));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn adam_matches_scripted_trajectory() {
    // Minimize sum((w - c)^2) for 10 steps and compare with a scalar replay
    // of the textbook update.
    let target = [0.3, -1.2, 2.0];
    let mut store = ParamStore::<f64>::new();
    let id = store.register("w", Tensor::new(vec![3], vec![1.0, 1.0, -1.0]).unwrap()).unwrap();
    let adam = Adam::with_lr(0.05);
    let mut state = AdamState::new(&store);

    let mut w_ref = [1.0f64, 1.0, -1.0];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for step in 1..=10 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sq_err_sum(w, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        adam.step(&mut store, &grads, &mut state).unwrap();

        for i in 0..3 {
            let g = 2.0 * (w_ref[i] - target[i]);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            w_ref[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in store.get(id).data.iter().zip(&w_ref) {
            assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
        }
    }
}
