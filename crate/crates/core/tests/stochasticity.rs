use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svtrv2::backbone::Variant;
use svtrv2::gradcheck::random_tensor;
use svtrv2::model::{ModelConfig, SvtrV2};
use svtrv2::tensor::Tape;

const TOL: f64 = 1e-9;

fn assert_rows_sum_to_one(data: &[f64], row: usize, what: &str) {
    assert_eq!(data.len() % row, 0);
    for (i, r) in data.chunks(row).enumerate() {
        let s: f64 = r.iter().sum();
        assert!((s - 1.0).abs() <= TOL, "{what} row {i} sums to {s}");
        assert!(r.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_rows_are_distributions_on_every_bucket_grid() {
    let mut config = ModelConfig::new(Variant::Nano, 8);
    config.sgm = true;
    let (model, store) = SvtrV2::init::<f64>(config, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(64, 64), (48, 96), (40, 112), (32, 160)] {
        let mut tape = Tape::<f64>::new();
        let mut img = random_tensor(&[2, h, w, 3], 1.0, &mut rng);
        img.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
        let x = tape.constant(img);
        let out = model.forward(&mut tape, &store, x).unwrap();
        let (gh, gw) = out.features.grid;
        assert_eq!((gh, gw), (h / 8, w / 4));
        let mh = out.sequence.horizontal.unwrap();
        let mv = out.sequence.vertical.unwrap();
        assert_rows_sum_to_one(tape.data(mh), gw, "horizontal");
        assert_rows_sum_to_one(tape.data(mv), gh, "vertical");
        let labels = vec![vec![1, 2, 3, 4, 5, 6, 7], vec![0, 0]];
        let sgm = model.sgm_loss(&mut tape, &store, &out.features, &labels).unwrap();
        for side in [sgm.left, sgm.right] {
            let ctx = tape.shape(side.context_attn).to_vec();
            assert_rows_sum_to_one(tape.data(side.context_attn), ctx[2], "context");
            assert_rows_sum_to_one(tape.data(side.visual_attn), gh * gw, "visual");
        }
    }
}
