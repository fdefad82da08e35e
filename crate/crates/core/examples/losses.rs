// Evaluates every tokenizer loss term on small tensors, combines them with
// the proposed weights and shows the adversarial gate and the ablations.

use candle_core::{Device, Tensor};
use tokvid::losses::{
    codebook_loss, cosine_distillation_loss, discriminator_loss, generator_loss, reconstruction_loss, total_loss,
    LossComponents, LossTerm, LossWeights, RandomConvFeatures, SSL_EPS,
};

fn main() -> tokvid::Result<()> {
    let dev = Device::Cpu;
    let x = Tensor::randn(0f32, 0.5, (2, 3, 16, 16), &dev)?;
    let x_hat = (&x + Tensor::randn(0f32, 0.1, (2, 3, 16, 16), &dev)?)?;
    let w = LossWeights::proposed();
    let phi = RandomConvFeatures::new(1, &[4, 8])?;

    let rec = reconstruction_loss(&x_hat, &x, &w, Some(&phi))?;
    let z = Tensor::randn(0f32, 1.0, (8, 4), &dev)?;
    let q = (&z + 0.5)?;
    let cb = codebook_loss(&q, &z, w.beta)?;
    let teacher = Tensor::randn(0f32, 1.0, (2, 4, 6), &dev)?;
    let ssl = cosine_distillation_loss(&teacher.neg()?, &teacher, SSL_EPS)?;
    println!("rec {:.4}  codebook {:.4} (1.25 * 0.25)  cosine of opposite vectors {:.4}",
        rec.to_scalar::<f32>()?, cb.to_scalar::<f32>()?, ssl.to_scalar::<f32>()?);

    // hinge terms at the decision boundary and beyond
    let real = Tensor::new(&[1f32, 2.0], &dev)?;
    let fake = Tensor::new(&[-1f32, -3.0], &dev)?;
    println!("discriminator {:.1}, generator {:.1}",
        discriminator_loss(&real, &fake)?.to_scalar::<f32>()?,
        generator_loss(&fake)?.to_scalar::<f32>()?);

    let c = LossComponents {
        reconstruction: Some(rec),
        codebook: Some(cb),
        ssl: Some(ssl),
        generator: Some(generator_loss(&fake)?),
    };
    for step in [0, w.adversarial_start_step] {
        println!("total at step {step}: {:.4}", total_loss(&c, &w, step)?.to_scalar::<f32>()?);
    }
    for t in LossTerm::ALL {
        let ablated = w.without(t);
        println!("{:<7} -> {:?}", t.label(), ablated);
    }
    Ok(())
}
