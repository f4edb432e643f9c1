use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mmfb::ablation::*;
use mmfb::model::Model;

fn main() {
    let mut cfg = AblationConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if let Some(p) = args.get(1) {
        cfg = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    }
    let t = Instant::now();
    let cache = std::env::var("FOUNDATION_CACHE").ok();
    let f = match &cache {
        Some(p) if Path::new(p).exists() => Foundation { model: Model::load(Path::new(p)).unwrap().0, lm_losses: vec![], dm_losses: vec![] },
        _ => {
            let f = build_foundation(&cfg).unwrap();
            if let Some(p) = &cache {
                f.model.save(Path::new(p), &BTreeMap::new(), BTreeMap::new()).unwrap();
            }
            f
        }
    };
    let n = |v: &Vec<f64>, a: usize, b: usize| if v.is_empty() { 0.0 } else { let b = b.min(v.len()); let a = a.min(b.saturating_sub(1)); v[a..b].iter().sum::<f64>() / (b - a) as f64 };
    let (l, d) = (&f.lm_losses, &f.dm_losses);
    eprintln!("foundation {:?}: lm {:.3}->{:.3} dm {:.3}->{:.3}", t.elapsed(),
        n(l, 0, 10), n(l, l.len().saturating_sub(20), l.len()), n(d, 0, 10), n(d, d.len().saturating_sub(50), d.len()));
    let data = prepare_data(&cfg).unwrap();
    eprintln!("foundation qa acc {:.3}", foundation_qa_accuracy(&f, &data).unwrap());
    let arms: Vec<bool> = match std::env::var("ARMS").as_deref() {
        Ok("on") => vec![true],
        Ok("off") => vec![false],
        _ => vec![false, true],
    };
    for &seed in &cfg.seeds {
        for &on in &arms {
            let t = Instant::now();
            let (r, _) = run_arm(&cfg, &f, &data, seed, on).unwrap();
            eprintln!("{:?} {:?}", r, t.elapsed());
        }
    }
}
