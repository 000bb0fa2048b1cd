use super::Element;

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<E> {
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub grad: Vec<E>,
}

impl<E: Element> Param<E> {
    pub fn new(shape: Vec<usize>, value: Vec<E>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![E::ZERO; value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = E::ZERO);
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<E> {
    pub shape: Vec<usize>,
    pub value: Vec<E>,
}

/// FNV-1a over the bit patterns of every value; used to prove which
/// parameters a half-step touched.
pub fn checksum<'a, E: Element>(values: impl IntoIterator<Item = &'a [E]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for slice in values {
        for v in slice {
            let bits = v.to_f64().to_bits();
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}
