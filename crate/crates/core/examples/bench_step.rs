use ndarray::{Array1, Array2, Array4};
use std::time::Instant;
use veilface_core::nets::{build_models, concat_latent_code, ArchConfig};
use veilface_core::rng::{normal_array, stream, StreamKind};

fn main() {
    let arch = ArchConfig::desk();
    let mut b = build_models::<f32>(&arch, 1).unwrap();
    let mut r = stream(1, StreamKind::LatentNoise, 0, 0);
    let imgs: Array4<f32> = normal_array(&mut r, (64, 3, 32, 32));
    let code = {
        let mut c = Array2::<f32>::zeros((64, 6));
        for i in 0..64 { c[[i, i % 6]] = 1.0; }
        c
    };
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        // G-ish pass: enc fwd, dec fwd, disc fwd, disc bwd, dec bwd, enc bwd
        let (lat, ec) = b.encoder.forward_train(&imgs);
        let w: Array2<f32> = normal_array(&mut r, (64, 32));
        let f = lat.sample_with_noise(&w);
        let z = concat_latent_code(&f, &code);
        let (fake, dc) = b.decoder.forward_train(&z);
        let (out, disc_c) = b.discriminator.forward_train(&fake);
        let d_real = Array1::<f32>::ones(64);
        let d_id = Array2::<f32>::ones((64, 6));
        let d_expr = Array2::<f32>::ones((64, 7));
        let dimg = b.discriminator.backward(&disc_c, &d_real, &d_id, &d_expr);
        let dz = b.decoder.backward(&dc, &dimg);
        let dmean = dz.slice(ndarray::s![.., ..32]).to_owned();
        let dlv = dmean.clone();
        let _ = b.encoder.backward(&ec, &dmean, &dlv);
        let _ = out;
        // D-ish pass: disc fwd real + fwd fake + both backward
        let (_, c1) = b.discriminator.forward_train(&imgs);
        let _ = b.discriminator.backward(&c1, &d_real, &d_id, &d_expr);
        let (_, c2) = b.discriminator.forward_train(&fake);
        let _ = b.discriminator.backward(&c2, &d_real, &d_id, &d_expr);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("per (G step + D step) pair: {:.3} s", dt);
}
