//! 3D evaluation metrics (volumetric Dice, average symmetric surface
//! distance) and result tabulation in the per-class + Mean layout.

use crate::error::{Error, Result};

/// Per-class and mean scores of one (method, subject) evaluation.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub method: String,
    pub subject: String,
    /// Foreground class ids, ascending.
    pub classes: Vec<u8>,
    /// DSC percent per class.
    pub dsc: Vec<f64>,
    /// ASD in voxels per class; `None` when a surface is empty.
    pub asd: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }

    /// Mean over the defined ASD entries; `None` if every class is undefined.
    pub fn mean_asd(&self) -> Option<f64> {
        let defined: Vec<f64> = self.asd.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

fn check_same_shape(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!("{} vs {} voxels", pred.len(), gt.len()),
        });
    }
    Ok(())
}

/// 3D Dice similarity coefficient in percent: 2|P∩G| / (|P|+|G|) * 100 over
/// the whole volume. Both sets empty scores 100 by convention.
pub fn dice3d(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.iter().zip(gt.iter()) {
        let ap = *a == class;
        let bg = *b == class;
        p += ap as usize;
        g += bg as usize;
        inter += (ap && bg) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (p + g) as f64)
}

/// Boundary voxels of the class set under 6-connectivity; voxels at the
/// volume border count as surface.
fn boundary_voxels(labels: &[u8], n: usize, h: usize, w: usize, class: u8) -> Vec<[i32; 3]> {
    let plane = h * w;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= n as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        labels[z as usize * plane + y as usize * w + x as usize] == class
    };
    let mut out = Vec::new();
    for z in 0..n as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let interior = at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                if !interior {
                    out.push([z as i32, y as i32, x as i32]);
                }
            }
        }
    }
    out
}

fn nearest_distance(p: [i32; 3], set: &[[i32; 3]]) -> f64 {
    let mut best = i64::MAX;
    for q in set {
        let dz = (p[0] - q[0]) as i64;
        let dy = (p[1] - q[1]) as i64;
        let dx = (p[2] - q[2]) as i64;
        let d = dz * dz + dy * dy + dx * dx;
        if d < best {
            best = d;
            if best == 0 {
                break;
            }
        }
    }
    (best as f64).sqrt()
}

/// 3D average symmetric surface distance in voxels, brute-force nearest
/// neighbor between 6-connectivity boundary sets. `None` when either surface
/// is empty (reported as "n/a" downstream).
pub fn asd3d(pred: &[u8], gt: &[u8], n: usize, h: usize, w: usize, class: u8) -> Result<Option<f64>> {
    check_same_shape(pred, gt)?;
    if pred.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            op: "asd3d",
            detail: format!("{} voxels for {}x{}x{}", pred.len(), n, h, w),
        });
    }
    let bp = boundary_voxels(pred, n, h, w, class);
    let bg = boundary_voxels(gt, n, h, w, class);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in &bp {
        total += nearest_distance(*p, &bg);
    }
    for g in &bg {
        total += nearest_distance(*g, &bp);
    }
    Ok(Some(total / (bp.len() + bg.len()) as f64))
}

/// Evaluate one prediction volume against ground truth over the foreground
/// classes 1..K.
pub fn evaluate_volume(
    method: &str,
    subject: &str,
    pred: &[u8],
    gt: &[u8],
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
) -> Result<MetricReport> {
    let classes: Vec<u8> = (1..num_classes as u8).collect();
    let mut dsc = Vec::with_capacity(classes.len());
    let mut asd = Vec::with_capacity(classes.len());
    for k in &classes {
        dsc.push(dice3d(pred, gt, *k)?);
        asd.push(asd3d(pred, gt, n, h, w, *k)?);
    }
    Ok(MetricReport {
        method: method.to_string(),
        subject: subject.to_string(),
        classes,
        dsc,
        asd,
    })
}

/// Aggregated per-method row: per-class means over subjects plus the Mean
/// column, mirroring the usual comparison-table layout.
#[derive(Debug, Clone)]
pub struct MethodRow {
    pub method: String,
    pub dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub asd: Vec<Option<f64>>,
    pub mean_asd: Option<f64>,
    /// Count of (subject, class) cells with undefined ASD.
    pub missing_asd: usize,
}

/// Aggregate reports by method (insertion order preserved) and render per
/// class + Mean columns.
pub fn aggregate(reports: &[MetricReport], method_order: &[&str]) -> Vec<MethodRow> {
    let mut rows = Vec::new();
    for method in method_order {
        let of_method: Vec<&MetricReport> = reports.iter().filter(|r| r.method == *method).collect();
        if of_method.is_empty() {
            continue;
        }
        let n_classes = of_method[0].classes.len();
        let mut dsc = vec![0.0; n_classes];
        let mut asd_sum = vec![0.0; n_classes];
        let mut asd_count = vec![0usize; n_classes];
        let mut missing = 0usize;
        for r in &of_method {
            for k in 0..n_classes {
                dsc[k] += r.dsc[k];
                match r.asd[k] {
                    Some(v) => {
                        asd_sum[k] += v;
                        asd_count[k] += 1;
                    }
                    None => missing += 1,
                }
            }
        }
        for d in &mut dsc {
            *d /= of_method.len() as f64;
        }
        let asd: Vec<Option<f64>> = (0..n_classes)
            .map(|k| {
                if asd_count[k] == 0 {
                    None
                } else {
                    Some(asd_sum[k] / asd_count[k] as f64)
                }
            })
            .collect();
        let mean_dsc = dsc.iter().sum::<f64>() / n_classes as f64;
        let defined: Vec<f64> = asd.iter().flatten().copied().collect();
        let mean_asd = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        rows.push(MethodRow { method: method.to_string(), dsc, mean_dsc, asd, mean_asd, missing_asd: missing });
    }
    rows
}

fn fmt_asd(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x),
        None => "n/a".to_string(),
    }
}

/// Aligned text table: one row per method, DSC block then ASD block, each
/// with per-class columns and a Mean column.
pub fn render_table(rows: &[MethodRow], class_names: &[&str]) -> String {
    let mut out = String::new();
    let mut header = format!("{:<10}", "Method");
    header.push_str(" |");
    for name in class_names {
        header.push_str(&format!(" DSC% {:<4}", name));
    }
    header.push_str(&format!(" {:<9}", "DSC% Mean"));
    header.push_str(" |");
    for name in class_names {
        header.push_str(&format!(" ASD {:<5}", name));
    }
    header.push_str(&format!(" {:<8}", "ASD Mean"));
    out.push_str(&header);
    out.push('\n');
    out.push_str(&"-".repeat(header.len()));
    out.push('\n');
    for row in rows {
        let mut line = format!("{:<10}", row.method);
        line.push_str(" |");
        for d in &row.dsc {
            line.push_str(&format!(" {:>8.1} ", d));
        }
        line.push_str(&format!(" {:>8.1}", row.mean_dsc));
        line.push_str(" |");
        for a in &row.asd {
            line.push_str(&format!(" {:>8} ", fmt_asd(*a)));
        }
        line.push_str(&format!(" {:>8}", fmt_asd(row.mean_asd)));
        out.push_str(&line);
        out.push('\n');
    }
    let total_missing: usize = rows.iter().map(|r| r.missing_asd).sum();
    if total_missing > 0 {
        out.push_str(&format!(
            "({} undefined ASD cell(s) excluded from the means)\n",
            total_missing
        ));
    }
    out
}

/// CSV rows: method,subject,class,dsc,asd with "n/a" for undefined ASD.
pub fn render_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("method,subject,class,dsc,asd\n");
    for r in reports {
        for (i, class) in r.classes.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                r.method,
                r.subject,
                class,
                r.dsc[i],
                match r.asd[i] {
                    Some(v) => format!("{:.6}", v),
                    None => "n/a".to_string(),
                }
            ));
        }
    }
    out
}
