use crate::fail::Failure;
use caf_core::detect::{detector_forward, ToyDetectorParams};
use caf_core::io::{read_tensor, write_tensor, Checkpoint};
use caf_core::tensor::Tensor4;
use std::path::Path;

pub fn run(checkpoint: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let params = ToyDetectorParams::<f32>::from_checkpoint(&Checkpoint::read(checkpoint)?)?;
    let img: Tensor4<f32> = read_tensor(input)?;
    let preds = detector_forward(&img, &params)?;
    write_tensor(out, &preds)?;
    let (n, c, h, w) = preds.shape();
    println!("{} -> {} ({n}x{c}x{h}x{w})", input.display(), out.display());
    Ok(())
}
