//! TIFF LZW encoder: MSB-first codes, 9 to 12 bits, Clear = 256, EOI = 257,
//! with the code width widening as libtiff's encoder does.

const CLEAR: u16 = 256;
const EOI: u16 = 257;
const FIRST_FREE: u16 = 258;
const TABLE_LIMIT: u16 = 4094;

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn put(&mut self, code: u16, width: u32) {
        self.acc = (self.acc << width) | code as u32;
        self.nbits += width;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1 << self.nbits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.out
    }
}

/// (prefix code, next byte) -> code lookup, invalidated in O(1) by bumping a generation.
struct Table {
    slots: Vec<(u32, u16)>,
    generation: u32,
}

impl Table {
    fn new() -> Self {
        Table {
            slots: vec![(0, 0); 4096 * 256],
            generation: 1,
        }
    }

    fn get(&self, prefix: u16, byte: u8) -> Option<u16> {
        let (g, code) = self.slots[prefix as usize * 256 + byte as usize];
        (g == self.generation).then_some(code)
    }

    fn insert(&mut self, prefix: u16, byte: u8, code: u16) {
        self.slots[prefix as usize * 256 + byte as usize] = (self.generation, code);
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.slots.fill((0, 0));
            self.generation = 1;
        }
    }
}

thread_local! {
    // 8 MiB; allocating it per segment dominates encoding of small tiles.
    static TABLE: std::cell::RefCell<Table> = std::cell::RefCell::new(Table::new());
}

fn width_for(next_code: u16) -> u32 {
    match next_code {
        0..=511 => 9,
        512..=1023 => 10,
        1024..=2047 => 11,
        _ => 12,
    }
}

pub fn encode(data: &[u8]) -> Vec<u8> {
    TABLE.with(|t| {
        let mut table = t.borrow_mut();
        table.reset();
        encode_with(data, &mut table)
    })
}

fn encode_with(data: &[u8], table: &mut Table) -> Vec<u8> {
    let mut w = BitWriter {
        out: Vec::with_capacity(data.len() / 2 + 16),
        acc: 0,
        nbits: 0,
    };
    let mut next_code = FIRST_FREE;
    w.put(CLEAR, 9);
    let Some((&first, rest)) = data.split_first() else {
        w.put(EOI, 9);
        return w.finish();
    };
    let mut current = first as u16;
    for &byte in rest {
        if let Some(code) = table.get(current, byte) {
            current = code;
            continue;
        }
        w.put(current, width_for(next_code));
        table.insert(current, byte, next_code);
        next_code += 1;
        if next_code == TABLE_LIMIT {
            w.put(CLEAR, 12);
            table.reset();
            next_code = FIRST_FREE;
        }
        current = byte as u16;
    }
    w.put(current, width_for(next_code));
    // The decoder registers one more entry after the final code.
    let eoi_width = width_for((next_code + 1).min(TABLE_LIMIT));
    w.put(EOI, eoi_width);
    w.finish()
}
