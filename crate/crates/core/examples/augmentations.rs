//! Weak (jitter and scale) and strong (permute and jitter) views of one
//! two-channel window.

use tfda::augment::{apply, stream_id, AugPolicy};

fn main() -> tfda::Result<()> {
    let len = 16;
    let x: Vec<f64> = (0..2 * len).map(|i| ((i % len) as f64 * 0.4).sin()).collect();
    for policy in [AugPolicy::weak(0), AugPolicy::strong(0)] {
        policy.validate()?;
        let v = apply(&x, 2, &policy, stream_id(0, 1, 3, 0));
        let again = apply(&x, 2, &policy, stream_id(0, 1, 3, 0));
        assert_eq!(v, again);
        let shown: Vec<String> = v[..6].iter().map(|a| format!("{a:+.3}")).collect();
        println!("{:?}: {}", policy.kind, shown.join(" "));
    }
    Ok(())
}
