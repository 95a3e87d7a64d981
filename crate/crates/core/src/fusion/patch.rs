use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Non-overlapping `stride x stride` patches:
/// `[B,C,H,W] -> [B, (H/stride)*(W/stride), stride*stride, C]`.
///
/// Patches are in raster order over the patch grid; pixels inside a patch are
/// in raster order too.
pub fn patch_extract(g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("patch_extract expects [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::dim(format!(
            "spatial size {h}x{w} is not divisible by patch stride {stride}; pad the input first"
        )));
    }
    let (ho, wo) = (h / stride, w / stride);
    let t = g.reshape(x, &[b, c, ho, stride, wo, stride])?;
    let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(t, &[b, ho * wo, stride * stride, c])
}

/// Inverse of [`patch_extract`] back onto an `h x w` map.
pub fn patch_assemble(g: &mut Graph, patches: Var, h: usize, w: usize, stride: usize) -> Result<Var> {
    let s = g.shape(patches).to_vec();
    if s.len() != 4
        || stride == 0
        || !h.is_multiple_of(stride)
        || !w.is_multiple_of(stride)
        || s[1] != (h / stride) * (w / stride)
        || s[2] != stride * stride
    {
        return Err(Error::dim(format!(
            "patch tensor {s:?} does not tile a {h}x{w} map with stride {stride}"
        )));
    }
    let (b, c, ho, wo) = (s[0], s[3], h / stride, w / stride);
    let t = g.reshape(patches, &[b, ho, wo, stride, stride, c])?;
    let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(t, &[b, c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_patch_holds_all_pixels_in_raster_order() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = patch_extract(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 4, 1]);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn stride_one_matches_tokenize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 4], |i| i as f64));
        let p = patch_extract(&mut g, x, 1).unwrap();
        let t = crate::nn::tokenize(&mut g, x).unwrap();
        assert_eq!(g.shape(p), &[2, 8, 1, 3]);
        assert_eq!(g.value(p).data(), g.value(t).data());
    }

    #[test]
    fn shape_contract_and_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64).sin()));
        let p = patch_extract(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 4, 4, 3]);
        let back = patch_assemble(&mut g, p, 4, 4, 2).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn indivisible_input_asks_for_padding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        let err = patch_extract(&mut g, x, 2).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }
}
