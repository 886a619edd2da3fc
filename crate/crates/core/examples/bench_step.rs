use std::time::Instant;

use paec::autodiff::Tape;
use paec::dsp::{self, Waveform};
use paec::model::{spectral_loss, Conditioning, Gtcnn, ModelConfig, Selection};
use rand::{Rng, SeedableRng};

fn main() {
    let secs: f64 = std::env::args().nth(1).map_or(1.0, |s| s.parse().unwrap());
    let n = (secs * 16000.0) as usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let y = Waveform::new((0..n).map(|_| rng.gen_range(-0.1..0.1)).collect());
    let x = Waveform::new((0..n).map(|_| rng.gen_range(-0.1..0.1)).collect());
    let feats = dsp::make_features(&y, &x).unwrap();
    let clean = dsp::stft(&y).unwrap();
    let model = Gtcnn::<f32>::new(ModelConfig::desk(Selection::Es)).unwrap();
    println!("{}", model.count_params());
    let cond = Conditioning::near(vec![0.044; 512]);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &feats, &cond).unwrap();
        let t1 = t0.elapsed();
        let loss = spectral_loss(&mut tape, &out, &clean).unwrap();
        let _g = tape.backward(loss).unwrap();
        println!("T={} fwd {:?} total {:?}", feats.frames, t1, t0.elapsed());
    }
}
