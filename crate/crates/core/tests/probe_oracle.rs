use mmices::attention_probe::{
    build_cross_mask, draw_instance, forward, probe_instance, run_probe, InterleaveLayout, Matrix, ProbeWeights,
    SegmentShape, VisualMask,
};

const TOL: f64 = 1e-6;

fn layout(shapes: &[(usize, usize)]) -> InterleaveLayout {
    InterleaveLayout::new(
        shapes
            .iter()
            .map(|&(image_tokens, text_tokens)| SegmentShape {
                image_tokens,
                text_tokens,
            })
            .collect(),
    )
    .unwrap()
}

/// Walks the interleaved sequence token by token. An image resets the
/// visible set to its own tokens; a segment without an image leaves nothing
/// visible; text tokens see the current visible set.
fn enumerate_mask(shapes: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let n_img: usize = shapes.iter().map(|s| s.0).sum();
    let mut rows = Vec::new();
    let mut next_img = 0;
    for &(imgs, txts) in shapes {
        let visible: Vec<usize> = (next_img..next_img + imgs).collect();
        next_img += imgs;
        for _ in 0..txts {
            rows.push((0..n_img).map(|v| visible.contains(&v)).collect());
        }
    }
    rows
}

fn all_layouts() -> Vec<Vec<(usize, usize)>> {
    let shapes: Vec<(usize, usize)> = (0..=2).flat_map(|i| (1..=2).map(move |t| (i, t))).collect();
    let mut out: Vec<Vec<(usize, usize)>> = shapes.iter().map(|&s| vec![s]).collect();
    let mut frontier = out.clone();
    for _ in 1..3 {
        let mut next = Vec::new();
        for l in &frontier {
            for &s in &shapes {
                let mut m = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn cross_mask_matches_enumerator_on_every_small_layout() {
    let layouts = all_layouts();
    assert_eq!(layouts.len(), 6 + 36 + 216);
    for shapes in layouts {
        let m = build_cross_mask(&layout(&shapes));
        let want = enumerate_mask(&shapes);
        assert_eq!(m.rows, want.len());
        for (t, row) in want.iter().enumerate() {
            assert_eq!(m.row(t), row.as_slice(), "layout {shapes:?} row {t}");
        }
    }
}

#[test]
fn single_segment_mask_is_all_true() {
    let m = build_cross_mask(&layout(&[(3, 2)]));
    assert!((0..2).all(|t| m.row(t).iter().all(|&b| b)));
}

// Dense reference forward pass.

fn mat(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect())
        .collect()
}

fn masked_softmax(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    if !allowed.iter().any(|&a| a) {
        return vec![0.0; scores.len()];
    }
    let z: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(&s, &a)| if a { s } else { f64::NEG_INFINITY })
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], allowed: &[Vec<bool>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q.first().map_or(0, Vec::len) as f64;
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for (t, qt) in q.iter().enumerate() {
        let scores: Vec<f64> = k
            .iter()
            .map(|kc| qt.iter().zip(kc).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let w = masked_softmax(&scores, &allowed[t]);
        let dim = v.first().map_or(q[0].len(), Vec::len);
        let o: Vec<f64> = (0..dim).map(|j| w.iter().zip(v).map(|(a, vr)| a * vr[j]).sum()).collect();
        weights.push(w);
        out.push(o);
    }
    (weights, out)
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

struct Reference {
    cross_attn: Vec<Vec<Vec<f64>>>,
    self_attn: Vec<Vec<Vec<f64>>>,
    hidden: Vec<Vec<Vec<f64>>>,
}

fn reference_forward(shapes: &[(usize, usize)], w: &ProbeWeights, images: &Matrix, text: &Matrix, mask: VisualMask) -> Reference {
    let cross_mask = enumerate_mask(shapes);
    let mut img = mat(images);
    let mut start = 0;
    for (seg, &(n, _)) in shapes.iter().enumerate() {
        let is_query = seg + 1 == shapes.len();
        let hide = match mask {
            VisualMask::None => false,
            VisualMask::MaskDemoVisual => !is_query,
            VisualMask::MaskQueryVisual => is_query,
        };
        if hide {
            for row in &mut img[start..start + n] {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        start += n;
    }
    let n_text = text.rows;
    let causal: Vec<Vec<bool>> = (0..n_text).map(|t| (0..n_text).map(|s| s <= t).collect()).collect();
    let mut h = mat(text);
    let mut r = Reference {
        cross_attn: Vec::new(),
        self_attn: Vec::new(),
        hidden: Vec::new(),
    };
    for b in &w.blocks {
        let (ca, co) = attend(
            &mul(&h, &mat(&b.cross_q)),
            &mul(&img, &mat(&b.cross_k)),
            &mul(&img, &mat(&b.cross_v)),
            &cross_mask,
        );
        let co: Vec<Vec<f64>> = if img.is_empty() { vec![vec![0.0; w.dim]; n_text] } else { co };
        h = add(&h, &co);
        let (sa, so) = attend(&mul(&h, &mat(&b.self_q)), &mul(&h, &mat(&b.self_k)), &mul(&h, &mat(&b.self_v)), &causal);
        h = add(&h, &so);
        r.cross_attn.push(ca);
        r.self_attn.push(sa);
        r.hidden.push(h.clone());
    }
    r
}

fn assert_close(got: &Matrix, want: &[Vec<f64>], what: &str) {
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let g = got.row(i)[j];
            assert!((g - w).abs() <= TOL, "{what}[{i}][{j}]: {g} vs {w}");
        }
    }
}

#[test]
fn forward_matches_dense_reference() {
    type Case = (&'static [(usize, usize)], usize, usize);
    let cases: [Case; 6] = [
        (&[(1, 2), (1, 2), (1, 1)], 8, 1),
        (&[(2, 3), (0, 2), (3, 1)], 5, 2),
        (&[(0, 1), (1, 1)], 3, 1),
        (&[(4, 1)], 16, 3),
        (&[(1, 1), (2, 2), (0, 1), (1, 3)], 12, 2),
        (&[(0, 2), (0, 1)], 4, 1),
    ];
    for (shapes, dim, depth) in cases {
        let l = layout(shapes);
        for seed in 0..5 {
            let (w, images, text) = draw_instance(&l, dim, depth, seed);
            for mask in [VisualMask::None, VisualMask::MaskDemoVisual, VisualMask::MaskQueryVisual] {
                let got = forward(&l, &w, &images, &text, mask).unwrap();
                let want = reference_forward(shapes, &w, &images, &text, mask);
                for (b, block) in got.blocks.iter().enumerate() {
                    let tag = format!("{l} seed {seed} {mask:?} block {b}");
                    assert_close(&block.cross_attn, &want.cross_attn[b], &format!("{tag} cross_attn"));
                    assert_close(&block.self_attn, &want.self_attn[b], &format!("{tag} self_attn"));
                    assert_close(&block.hidden, &want.hidden[b], &format!("{tag} hidden"));
                }
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let l = layout(&[(2, 2), (0, 1), (3, 2)]);
    let (w, images, text) = draw_instance(&l, 10, 2, 9);
    let out = forward(&l, &w, &images, &text, VisualMask::None).unwrap();
    for block in &out.blocks {
        for t in 0..l.total_text_tokens() {
            let cross: f64 = block.cross_attn.row(t).iter().sum();
            let empty = l.image_range(l.segment_of_text(t)).is_empty();
            if empty {
                assert_eq!(cross, 0.0);
            } else {
                assert!((cross - 1.0).abs() <= TOL);
            }
            let own: f64 = block.self_attn.row(t).iter().sum();
            assert!((own - 1.0).abs() <= TOL);
        }
    }
}

#[test]
fn zero_images_make_settings_coincide() {
    let l = layout(&[(1, 2), (1, 2), (1, 1)]);
    let (w, images, text) = draw_instance(&l, 8, 1, 4);
    let zeros = Matrix::zeros(images.rows, images.cols);
    let outs: Vec<_> = [VisualMask::None, VisualMask::MaskDemoVisual, VisualMask::MaskQueryVisual]
        .into_iter()
        .map(|m| forward(&l, &w, &zeros, &text, m).unwrap())
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    let c = probe_instance(&l, &w, &zeros, &text).unwrap();
    assert_eq!(c.hidden_mask_demo, 1.0);
    assert_eq!(c.hidden_mask_query, 1.0);
}

#[test]
fn report_is_mean_of_single_seed_runs() {
    let l = layout(&[(1, 2), (2, 1), (1, 2)]);
    let seeds: Vec<u64> = (10..30).collect();
    let report = run_probe(&l, &seeds, 12, 2).unwrap();
    let singles: Vec<_> = seeds.iter().map(|&s| run_probe(&l, &[s], 12, 2).unwrap()).collect();
    let mean = |f: fn(&mmices::attention_probe::ProbeReport) -> f64| singles.iter().map(f).sum::<f64>() / singles.len() as f64;
    assert!((report.cos_hidden_mask_demo - mean(|r| r.cos_hidden_mask_demo)).abs() < 1e-12);
    assert!((report.cos_hidden_mask_query - mean(|r| r.cos_hidden_mask_query)).abs() < 1e-12);
    assert!((report.cos_attn_mask_demo - mean(|r| r.cos_attn_mask_demo)).abs() < 1e-12);
    assert!((report.cos_attn_mask_query - mean(|r| r.cos_attn_mask_query)).abs() < 1e-12);
    assert_eq!(report.seeds_used, seeds);
}

#[test]
fn cosines_are_bounded() {
    let l = layout(&[(1, 2), (1, 2), (1, 1)]);
    let seeds: Vec<u64> = (0..100).collect();
    for s in &seeds {
        let r = run_probe(&l, &[*s], 16, 1).unwrap();
        for c in [r.cos_hidden_mask_demo, r.cos_hidden_mask_query, r.cos_attn_mask_demo, r.cos_attn_mask_query] {
            assert!((-1.0..=1.0).contains(&c));
        }
    }
}
