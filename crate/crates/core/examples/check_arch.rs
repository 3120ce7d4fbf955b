fn main() {
    use shapediff_core::models::*;
    use rand::SeedableRng;
    let arch = BaseArch {
        unet: UNetArch {
            in_ch: 3, out_ch: 3, resolution: 16,
            widths: vec![16, 32, 64], temb_dim: 64, groups: 8, attn_dim: 32,
            tokens: Some(TokenSpec { k: 8, d: 64 }),
        },
        desc_dim: 8, head_widths: vec![16, 32, 32], cond_hw: 32, task: None,
    };
    let m = BaseModel::new(arch);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let ps = m.init_params(&mut rng);
    let attn_names: Vec<&str> = (0..ps.len()).map(|i| ps.name_at(i)).filter(|n| n.contains("attn")).collect();
    println!("params {} | attn tensors: {:?}", ps.num_scalars(), attn_names.len());
    for n in attn_names.iter().take(30) { println!("  {n}"); }
}
