use cherry_core::field::{FieldSpec, Plug};
use cherry_core::section::build_cherry_map;

#[test]
fn probe_map() {
    let spec = FieldSpec::cherry(
        0.6,
        Plug { cx: 0.5, cy: 0.5, r: 0.2, v0: 0.25, kappa: 1.0, gamma: 4.0 },
        vec![],
    )
    .unwrap()
    .validate()
    .unwrap();
    let map = build_cherry_map(&spec, 256, 60.0).unwrap();
    let flat = map.flat_interval().unwrap();
    println!("flat lo={} hi={} len={} value={}", flat.lo, flat.hi, flat.length(), flat.value);
    println!("stable_hit={:?} gap={:?}", map.stable_hit(), map.gap_endpoints());
    let mid = flat.lo + 0.5 * flat.length();
    println!("eval(lo)={} eval(mid)={} eval(hi)={}", map.eval(flat.lo), map.eval(mid), map.eval(flat.hi));
    // nodes near the flat arc
    let g = map.grid();
    let l = map.lift_values();
    for i in 0..g.len() {
        if (g[i] - flat.lo).abs() < 0.03 || (g[i] - flat.hi).abs() < 0.03 {
            println!("node {:4}  grid={:.9} lift={:.9}", i, g[i], l[i]);
        }
    }
}
