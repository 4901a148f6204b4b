// debug: find worst coordinate in span grad check
use afd_core::config::ModelConfig;
use afd_core::graph::Graph;
use afd_core::numeric::matrix::Matrix;
use afd_core::scheduler::{Scheduler, TaskTarget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        vocab_a: 6, token_dim: 4, latent_dim: 4, encoder_hidden: 5,
        model_dim: 6, llm_vocab: 32, layers: 2, experts: 3,
        rank_init: 2, rank_max: 4, ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sched = Scheduler::new(&cfg, 5, 4, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t = 4; let d = 6;
    let k = Matrix::new(t, d, (0..t*d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let v = Matrix::new(t, d, (0..t*d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = TaskTarget::Span(1, 2);

    let loss_of = |s: &Scheduler| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let vars = s.register(&mut g, true, false);
        let pooled = s.pooled_graph(&mut g, &vars, "probe query text", &k, &v, false).unwrap();
        let (loss, _) = s.task_loss_graph(&mut g, &vars, pooled, &k, &target, 1.0).unwrap();
        let value = g.scalar_value(loss);
        let grads = g.backward(loss);
        let sg = vars.collect(&g, &grads, false);
        let mut flat = Vec::new();
        for (l, r) in sg.routers.iter().enumerate() {
            flat.extend_from_slice(r.data());
            for j in 0..sg.expert_a[l].len() {
                flat.extend_from_slice(sg.expert_a[l][j].data());
                flat.extend_from_slice(sg.expert_b[l][j].data());
            }
        }
        for (w, b, e) in [(&sg.gen_w, &sg.gen_b, &sg.gen_e), (&sg.step_w, &sg.step_b, &sg.step_e)] {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b.data());
            flat.extend_from_slice(e.data());
        }
        flat.extend_from_slice(sg.span_start.data());
        flat.extend_from_slice(sg.span_end.data());
        (value, flat)
    };

    let (_, analytic) = loss_of(&sched);
    let x0 = sched.flatten();
    let h = 1e-5;
    let mut worst = (0usize, 0.0f64, 0.0, 0.0);
    for i in 0..x0.len() {
        let mut xp = x0.clone(); xp[i] += h;
        let mut s = sched.clone(); s.load_flat(&xp).unwrap();
        let fp = loss_of(&s).0;
        let mut xm = x0.clone(); xm[i] -= h;
        let mut s = sched.clone(); s.load_flat(&xm).unwrap();
        let fm = loss_of(&s).0;
        let n = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > worst.1 { worst = (i, rel, a, n); }
    }
    println!("total params {}", x0.len());
    println!("worst coord {} rel {} analytic {} numeric {}", worst.0, worst.1, worst.2, worst.3);
}
