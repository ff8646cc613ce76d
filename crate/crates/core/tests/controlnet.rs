use lldm_core::controlnet::{train_controlnet, Condition, ControlNet, ControlNetConfig};
use lldm_core::diffusion::{probe_set, q_sample_batch, train_ldm, DenoiserConfig, LdmTrainParams, ScheduleConfig};
use lldm_core::nn::Array;
use lldm_core::rng::{normal_array, seeded};

fn probe_loss(net: &ControlNet, latents: &[Array<f32>], conds: &[Condition], per_item: usize) -> f64 {
    let schedule = ScheduleConfig::short(50).build().unwrap();
    let (z0, t, eps) = probe_set(latents, &schedule, per_item, 9);
    let c: Vec<&Array<f32>> = (0..t.len()).map(|i| &conds[i / per_item].c).collect();
    let zt = q_sample_batch(&z0, &t, &eps, &schedule).unwrap();
    let out = net.predict_batch_conditional(&zt, &t, &Array::stack(&c)).unwrap();
    let d = out.zip_map(&eps, |a, b| (a - b) * (a - b));
    d.sum() as f64 / d.len() as f64
}

#[test]
fn overfits_eight_pairs() {
    let schedule = ScheduleConfig::short(50).build().unwrap();
    let mut rng = seeded(77);
    let latents: Vec<Array<f32>> = (0..8).map(|_| normal_array(&mut rng, &[4, 8, 8, 4])).collect();
    // The condition carries the clean latent, so conditioning can explain the noise.
    let conds: Vec<Condition> = latents.iter().map(|z| Condition { c: z.clone() }).collect();
    let cfg = DenoiserConfig {
        base_width: 8,
        time_dim: 8,
        ..DenoiserConfig::desk(4, 3)
    };
    let tp = |lr, steps, seed| LdmTrainParams {
        lr,
        batch_size: 8,
        steps,
        seed,
    };
    let (base, _) = train_ldm(&latents, &cfg, &schedule, &tp(2e-3, 60, 1), "base").unwrap();
    let branch = ControlNetConfig {
        hint_channels: 4,
        seed: 5,
    };
    let initial = probe_loss(&ControlNet::new(base.clone(), branch.clone()).unwrap(), &latents, &conds, 4);
    let (net, log) = train_controlnet(&latents, &conds, base, &branch, &schedule, &tp(5e-3, 1000, 2), "controlnet").unwrap();
    let fin = probe_loss(&net, &latents, &conds, 4);
    assert_eq!(log.rows.len(), 1000);
    assert!(fin < 0.6 * initial, "probe loss {initial:.4} -> {fin:.4}");
}
