//! Shared per-patch embedder: a small grayscale image is cut into a grid of
//! P x P patches and each patch is mapped by the same two-layer MLP into a
//! D-dimensional instance representation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// Grayscale image with pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Parse ASCII PGM ("P2", maxval 255); pixel v maps to v/255.
    pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_pgm(&text)
    }

    pub fn parse_pgm(text: &str) -> Result<ImageGrid> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace());
        let magic = tokens
            .next()
            .ok_or_else(|| Error::Format("empty PGM".into()))?;
        if magic != "P2" {
            return Err(Error::Format(format!("expected P2 magic, got {magic}")));
        }
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("PGM missing {what}")))?
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("PGM bad {what}")))
        };
        let width = next_usize("width")?;
        let height = next_usize("height")?;
        let maxval = next_usize("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("PGM maxval must be 255, got {maxval}")));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let v = next_usize("pixel")?;
            if v > 255 {
                return Err(Error::Format(format!("PGM pixel {v} exceeds maxval")));
            }
            pixels.push(v as f64 / 255.0);
        }
        ImageGrid::new(height, width, pixels)
    }

    /// Write ASCII PGM; pixel = round(255 * value), round half up.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|c| format!("{}", (255.0 * self.at(r, c)).round() as u32))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Parameters of the shared two-layer patch embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w1: Tensor, // hidden x P^2
    pub b1: Tensor, // hidden
    pub w2: Tensor, // D x hidden
    pub b2: Tensor, // D
    pub patch: usize,
    pub hidden: usize,
    pub dim: usize,
}

/// Kaiming-style uniform init: weights in (-sqrt(6/fan_in), +sqrt(6/fan_in)),
/// biases zero.
pub fn init_encoder(
    patch: usize,
    hidden: usize,
    dim: usize,
    stream: &mut RandomStream,
) -> Result<EncoderParams> {
    if patch == 0 || hidden == 0 || dim == 0 {
        return Err(Error::InvalidArgument("encoder dims must be positive".into()));
    }
    let fan1 = (patch * patch) as f64;
    let bound1 = (6.0 / fan1).sqrt();
    let w1 = stream.uniform_tensor(-bound1, bound1, &[hidden, patch * patch])?;
    let fan2 = hidden as f64;
    let bound2 = (6.0 / fan2).sqrt();
    let w2 = stream.uniform_tensor(-bound2, bound2, &[dim, hidden])?;
    Ok(EncoderParams {
        w1,
        b1: Tensor::zeros(&[hidden]),
        w2,
        b2: Tensor::zeros(&[dim]),
        patch,
        hidden,
        dim,
    })
}

/// Cut an image into a row-major grid of P x P patches; row j of the output
/// is the row-major flattening of the j-th patch.
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} not divisible by patch side {patch}",
            image.height, image.width
        )));
    }
    let (gr, gc) = (image.height / patch, image.width / patch);
    let mut data = Vec::with_capacity(gr * gc * patch * patch);
    for pr in 0..gr {
        for pc in 0..gc {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(image.at(pr * patch + r, pc * patch + c));
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, patch * patch], data)
}

/// Inverse of `patchify` for a square grid of square patches.
pub fn unpatchify(patches: &Tensor, patch: usize, grid: usize) -> Result<ImageGrid> {
    if patches.rows() != grid * grid || patches.cols() != patch * patch {
        return Err(Error::ShapeMismatch("unpatchify shape".into()));
    }
    let side = grid * patch;
    let mut pixels = vec![0.0; side * side];
    for pr in 0..grid {
        for pc in 0..grid {
            let row = pr * grid + pc;
            for r in 0..patch {
                for c in 0..patch {
                    pixels[(pr * patch + r) * side + pc * patch + c] =
                        patches.at2(row, r * patch + c);
                }
            }
        }
    }
    ImageGrid::new(side, side, pixels)
}

/// Record the shared embedder on the graph: relu(W1 p + b1) then W2 . + b2,
/// applied to every patch row independently.
pub fn encode(
    graph: &mut Graph,
    patches: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let hidden = graph.matmul_bias(w1, patches, b1)?;
    let act = graph.relu(hidden);
    graph.matmul_bias(w2, act, b2)
}

/// Convenience wrapper: encode with concrete parameters outside a training
/// graph.
pub fn encode_tensor(patches: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.leaf(patches.clone());
    let (w1, b1) = (g.leaf(params.w1.clone()), g.leaf(params.b1.clone()));
    let (w2, b2) = (g.leaf(params.w2.clone()), g.leaf(params.b2.clone()));
    let out = encode(&mut g, p, w1, b1, w2, b2)?;
    Ok(g.value(out).clone())
}
