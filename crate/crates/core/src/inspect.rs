//! CSV/JSON dumps of the basis bank and of synthesized per-pixel kernels.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::adaptive::{synthesize_kernel, AdaptiveConvLayer};
use crate::error::{Error, Result};
use crate::fb_basis::{grid_csv, BasisBank};
use crate::tensor::Tensor;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one CSV per basis at its native size plus `index.json`.
pub fn inspect_basis(bank: &BasisBank, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(bank.len());
    let mut index = Vec::with_capacity(bank.len());
    for (b, basis) in bank.bases().iter().enumerate() {
        let name = format!("basis_{b:02}_{s}x{s}_{}.csv", basis.index.label(), s = basis.size);
        let path = dir.join(&name);
        write(&path, &basis.to_csv())?;
        index.push(json!({
            "index": b,
            "file": name,
            "size": basis.size,
            "n": basis.index.n.get(),
            "k": basis.index.k,
            "label": basis.index.label(),
            "lambda": basis.index.lambda,
        }));
        files.push(path);
    }
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    write(&dir.join("index.json"), &text)?;
    Ok(files)
}

/// Parses `"y,x;y,x"`.
pub fn parse_pixels(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let parts: Vec<&str> = p.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [y, x] => match (y.parse(), x.parse()) {
                    (Ok(y), Ok(x)) => Ok((y, x)),
                    _ => Err(Error::Config(format!("bad pixel '{p}'"))),
                },
                _ => Err(Error::Config(format!("bad pixel '{p}', expected y,x"))),
            }
        })
        .collect()
}

/// For an input `1×C×H×W`, writes the max-size kernel of every channel and
/// feature at each pixel as `kernel_y{y}_x{x}_c{c}_m{i}.csv`, and the
/// per-size coefficient energy (sum of squares over bases and features) to
/// `energy.json`. Returns the energy document.
pub fn inspect_kernels(
    layer: &AdaptiveConvLayer,
    image: &Tensor,
    pixels: &[(usize, usize)],
    dir: &Path,
) -> Result<serde_json::Value> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(Error::shape("inspect_kernels", format!("expected one image, got {n}")));
    }
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= h || x >= w) {
        return Err(Error::Config(format!("pixel ({y},{x}) outside {h}x{w} image")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let field = layer.generate_coefficients(image)?;
    let bank = layer.bank();
    let size = bank.max_size();
    let mut entries = Vec::new();
    for &(y, x) in pixels {
        for ch in 0..c {
            for i in 0..field.m {
                let kernel = synthesize_kernel(&field.feature(0, ch, i, y, x), bank)?;
                write(&dir.join(format!("kernel_y{y}_x{x}_c{ch}_m{i}.csv")), &grid_csv(kernel.data(), size))?;
            }
            let energy = layer.size_energy(&field, 0, ch, y, x);
            let total: f64 = energy.iter().sum();
            entries.push(json!({
                "y": y,
                "x": x,
                "channel": ch,
                "sizes": bank.sizes(),
                "energy": energy,
                "fraction": energy.iter().map(|e| if total > 0.0 { e / total } else { 0.0 }).collect::<Vec<_>>(),
            }));
        }
    }
    let doc = json!({ "kernel_size": size, "pixels": entries });
    write(&dir.join("energy.json"), &serde_json::to_string_pretty(&doc).expect("energy serialises"))?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_lists() {
        assert_eq!(parse_pixels("12,30;40,40").unwrap(), vec![(12, 30), (40, 40)]);
        assert_eq!(parse_pixels(" 1 , 2 ;").unwrap(), vec![(1, 2)]);
        assert!(parse_pixels("1;2").is_err());
        assert!(parse_pixels("a,b").is_err());
    }
}
