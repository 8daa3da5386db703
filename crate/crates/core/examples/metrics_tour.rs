//! Scores a blurred and a shifted copy of a phantom against the original.
//!
//! cargo run --release --example metrics_tour

use tabs::data::{generate_phantom, PhantomSpec, Volume};
use tabs::metrics::{evaluate_pair, Metric, MetricsRecord, Tissue};

fn shifted(v: &Volume, by: usize) -> Volume {
    let mut out = v.clone();
    let [_, h, w] = v.dims();
    let n = v.voxels();
    for c in 0..v.header.channels {
        for i in 0..n {
            let (z, y, x) = (i / (h * w), i / w % h, i % w);
            let src = if x >= by { c * n + z * h * w + y * w + (x - by) } else { c * n + i };
            out.data[c * n + i] = v.data[src];
        }
    }
    out
}

fn blurred(v: &Volume, weight: f32) -> Volume {
    let mut out = v.clone();
    for p in out.data.iter_mut() {
        *p = (1.0 - weight) * *p + weight / 3.0;
    }
    out
}

fn show(name: &str, r: &MetricsRecord) {
    println!("{name}");
    for t in Tissue::ALL {
        let cells: Vec<String> = Metric::ALL
            .iter()
            .map(|&m| format!("{} {}", m.key(), r.get(t, m).map_or("n/a".into(), |v| format!("{v:.3}"))))
            .collect();
        println!("  {:<6}{}", t.key(), cells.join("  "));
    }
}

fn main() -> tabs::Result<()> {
    let (gt, _) = generate_phantom(&PhantomSpec::sample(32, 4, 0.3))?;
    show("identical", &evaluate_pair(&gt, &gt)?);
    show("blurred 0.4", &evaluate_pair(&blurred(&gt, 0.4), &gt)?);
    show("shifted 2 voxels", &evaluate_pair(&shifted(&gt, 2), &gt)?);
    Ok(())
}
