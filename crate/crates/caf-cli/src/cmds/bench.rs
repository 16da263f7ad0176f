use crate::fail::Failure;
use caf_core::blocks::{
    acfm_global, channel_attention_mults, spatial_attention_mults, spatial_attention_reference,
    AcfmParams,
};
use caf_core::conv::{conv2d, conv2d_seq, conv3d_singleton, Conv3Spec, ConvSpec};
use caf_core::io::atomic_write;
use caf_core::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor4<f32> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor4::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("sized to match")
}

/// Median and sample variance of `reps` timed runs, in microseconds.
fn time_us(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        (times[reps / 2 - 1] + times[reps / 2]) / 2.0
    };
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = if reps > 1 {
        times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (reps - 1) as f64
    } else {
        0.0
    };
    (median, var)
}

pub fn run(reps: usize, out: Option<&Path>) -> Result<(), Failure> {
    if reps == 0 {
        return Err(Failure::usage("--reps must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let mut csv = String::from("op,n,c,h,w,reps,median_us,var_us2,mults_channel,mults_spatial\n");
    let row = |csv: &mut String,
                   op: &str,
                   shape: (usize, usize, usize, usize),
                   stats: (f64, f64),
                   mults: Option<(u128, u128)>| {
        let (n, c, h, w) = shape;
        let (median, var) = stats;
        let (mc, ms) = match mults {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(csv, "{op},{n},{c},{h},{w},{reps},{median:.1},{var:.1},{mc},{ms}")
            .expect("writing to a String cannot fail");
    };

    for &(c, h, w) in &[(8usize, 32usize, 32usize), (16, 32, 32), (32, 32, 32)] {
        let x = rand4(&mut rng, (1, c, h, w));
        let weights = rand4(&mut rng, (c, c, 3, 3));
        let bias: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let spec = ConvSpec::new(weights, Some(bias), (1, 1), (1, 1), (1, 1), 1)?;
        let stats = time_us(reps, || {
            conv2d(&x, &spec).expect("benched shapes are valid");
        });
        row(&mut csv, "conv2d", (1, c, h, w), stats, None);
        let stats = time_us(reps, || {
            conv2d_seq(&x, &spec).expect("benched shapes are valid");
        });
        row(&mut csv, "conv2d_seq", (1, c, h, w), stats, None);
    }

    for &(c, h, w) in &[(8usize, 16usize, 16usize), (16, 16, 16)] {
        let x = rand4(&mut rng, (1, c, h, w));
        let weights: Vec<f32> = (0..c * c * 27).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let spec = Conv3Spec::new(weights, c, c, None, (1, 1, 1), 1)?;
        let stats = time_us(reps, || {
            conv3d_singleton(&x, &spec).expect("benched shapes are valid");
        });
        row(&mut csv, "conv3d", (1, c, h, w), stats, None);
    }

    for &(c, h, w) in &[
        (8usize, 16usize, 16usize),
        (16, 16, 16),
        (32, 8, 8),
        (64, 8, 8),
        (64, 4, 4),
        (16, 32, 32),
    ] {
        let y = rand4(&mut rng, (1, c, h, w));
        let p = AcfmParams::<f32>::init(c, &mut rng)?;
        let mults = Some((channel_attention_mults(c, h * w), spatial_attention_mults(c, h * w)));
        let stats = time_us(reps, || {
            acfm_global(&y, &p).expect("benched shapes are valid");
        });
        row(&mut csv, "acfm_global", (1, c, h, w), stats, mults);
        let alpha = (c as f32).sqrt();
        let stats = time_us(reps, || {
            spatial_attention_reference(&y, &y, &y, alpha).expect("benched shapes are valid");
        });
        row(&mut csv, "attn_spatial", (1, c, h, w), stats, mults);
    }

    print!("{csv}");
    if let Some(path) = out {
        atomic_write(path, csv.as_bytes())?;
    }
    Ok(())
}
