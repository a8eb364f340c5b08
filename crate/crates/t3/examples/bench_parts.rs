use std::time::Instant;
use rand::SeedableRng;
use t3::tensor::{Init, Tensor};
use t3::vit::{patchify, BlockStack, PatchEncoder, ViTConfig};

fn timeit(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{name}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let b = 4;
    let imgs = Tensor::<f32>::init_with(&[b,3,224,224], Init::Uniform(-1.0,1.0), &mut rng);
    timeit("patchify fwd (no grad)", 20, || { let _ = patchify(&imgs, 16); });

    let cfg = ViTConfig::new(64, 2, 1);
    let enc = PatchEncoder::<f32>::new(cfg, &mut rng);
    let patches = patchify(&imgs, 16).detach();
    timeit("encoder embed fwd", 10, || { let _ = enc.embed(&patches); });

    let stack = BlockStack::<f32>::new(64, 2, 1, 4.0, &mut rng);
    let x = Tensor::<f32>::init_with(&[b,197,64], Init::Uniform(-1.0,1.0), &mut rng);
    timeit("1 block fwd (no grad path)", 10, || { let _ = stack.forward(&x, false); });

    let xg = x.detach().requires_grad();
    timeit("1 block fwd+bwd", 10, || {
        let (y, _) = stack.forward(&xg, false);
        let loss = y.sum_all();
        loss.backward();
        xg.zero_grad();
        for (_, p) in { let mut v = Vec::new(); stack.named_params("s", &mut v); v } { p.zero_grad(); }
    });

    // attention pieces
    let attn = &stack.blocks[0].attn;
    timeit("attn fwd", 10, || { let _ = attn.forward(&x, false); });
    let ln = &stack.blocks[0].ln1;
    timeit("layernorm fwd", 20, || { let _ = ln.forward(&x); });
    let fc1 = &stack.blocks[0].fc1;
    let fc2 = &stack.blocks[0].fc2;
    timeit("mlp fwd", 10, || { let _ = fc2.forward(&fc1.forward(&x).gelu()); });
    let w = Tensor::<f32>::init_with(&[64, 256], Init::Uniform(-1.0,1.0), &mut rng);
    timeit("raw matmul [788,64]x[64,256]", 50, || { let _ = x.reshape(&[788, 64]).matmul(&w); });

    // gelu alone
    let h = Tensor::<f32>::init_with(&[b*197, 256], Init::Uniform(-1.0,1.0), &mut rng);
    timeit("gelu on [788,256]", 50, || { let _ = h.gelu(); });
}
