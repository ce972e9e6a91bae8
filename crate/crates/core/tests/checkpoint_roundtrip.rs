use ffrmil_core::{Adam, Dense, Graph, NamedTensors, ParamSet, Tensor, CHECKPOINT_MAGIC};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn params_and_optimizer_state_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::<f32>::new();
    let d = Dense::new(&mut p, "fc", 5, 3, &mut rng);
    let mut adam = Adam::new(&p, 1e-3, 1e-3);
    let grads: Vec<Tensor<f32>> = p.iter().map(|(_, e)| e.value.map(|v| v * 0.5 + 0.1)).collect();
    adam.update(&mut p, &grads);

    let mut nt = NamedTensors::new();
    nt.push_params("param/", &p);
    nt.push_adam("adam/", &p, &adam);
    nt.push_u64("iteration", vec![1]);
    let bytes = nt.to_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

    let back = NamedTensors::from_bytes(&bytes).unwrap();
    let mut p2 = ParamSet::<f32>::new();
    let d2 = Dense::new(&mut p2, "fc", 5, 3, &mut ChaCha8Rng::seed_from_u64(1));
    back.load_params("param/", &mut p2).unwrap();
    let mut adam2 = Adam::new(&p2, 1e-3, 1e-3);
    back.load_adam("adam/", &p2, &mut adam2).unwrap();
    assert_eq!(p, p2);
    assert_eq!(adam, adam2);
    assert_eq!(back.u64s("iteration").unwrap(), vec![1]);

    // identical inference outputs, bit for bit
    let x = Tensor::from_vec(vec![0.1f32, -0.2, 0.3, 0.7, -1.1]);
    let run = |p: &ParamSet<f32>, d: &Dense| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = d.forward(&mut g, p, xv).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(&p, &d), run(&p2, &d2));
}

#[test]
fn shape_mismatch_on_load_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::<f64>::new();
    Dense::new(&mut p, "fc", 5, 3, &mut rng);
    let mut nt = NamedTensors::new();
    nt.push_params("", &p);
    let mut q = ParamSet::<f64>::new();
    Dense::new(&mut q, "fc", 4, 3, &mut rng);
    assert!(nt.load_params("", &mut q).is_err());
    let mut r = ParamSet::<f64>::new();
    Dense::new(&mut r, "other", 5, 3, &mut rng);
    assert!(nt.load_params("", &mut r).is_err());
}

#[test]
fn precision_converts_on_load() {
    let mut nt = NamedTensors::new();
    nt.push_tensor("t", &Tensor::<f64>::from_vec(vec![0.5, 0.25]));
    let t: Tensor<f32> = nt.tensor("t").unwrap();
    assert_eq!(t.data(), &[0.5, 0.25]);
}

proptest! {
    #[test]
    fn arbitrary_records_roundtrip(
        records in prop::collection::vec(
            ("[a-z/._]{1,12}", prop::collection::vec(-1e6f64..1e6, 0..20), any::<bool>()),
            0..6,
        ),
    ) {
        let mut nt = NamedTensors::new();
        for (name, values, single) in &records {
            if *single {
                nt.push_tensor(name.clone(), &Tensor::<f32>::from_vec(values.iter().map(|&v| v as f32).collect()));
            } else {
                nt.push_tensor(name.clone(), &Tensor::<f64>::from_vec(values.clone()));
            }
        }
        let back = NamedTensors::from_bytes(&nt.to_bytes()).unwrap();
        prop_assert_eq!(back, nt);
    }
}
