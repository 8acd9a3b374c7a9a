use proptest::prelude::*;
use windmill::arch::{Coord, Topology};
use windmill::interconnect::{directed_links, neighbors};
use windmill::memory::PaiArbiter;
use windmill::pe::{alu, ConfigWord, DecodeError, DstSel, Opcode, SrcSel};

fn bits(w: u64, hi: u32, lo: u32) -> u64 {
    (w >> lo) & ((1u64 << (hi - lo + 1)) - 1)
}

fn word() -> impl Strategy<Value = ConfigWord> {
    (0u8..16, 0u8..16, 0u8..16, 0u8..3, any::<u16>(), any::<u8>(), 0u8..16, 0u8..8).prop_map(
        |(op, s0, s1, dst, imm, iters, sreg, next)| ConfigWord {
            opcode: Opcode::from_code(op).unwrap(),
            src0: SrcSel::from_code(s0),
            src1: SrcSel::from_code(s1),
            dst: DstSel::from_code(dst).unwrap(),
            imm,
            iter_count: iters,
            shared_reg_idx: sreg,
            next_step: next,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn valid_words_round_trip(w in word()) {
        let raw = w.encode();
        prop_assert_eq!(ConfigWord::decode(raw), Ok(w));
        prop_assert_eq!(bits(raw, 63, 59), u64::from(w.opcode.code()));
        prop_assert_eq!(bits(raw, 58, 55), u64::from(w.src0.code()));
        prop_assert_eq!(bits(raw, 54, 51), u64::from(w.src1.code()));
        prop_assert_eq!(bits(raw, 50, 47), w.dst as u64);
        prop_assert_eq!(bits(raw, 46, 31), u64::from(w.imm));
        prop_assert_eq!(bits(raw, 30, 23), u64::from(w.iter_count));
        prop_assert_eq!(bits(raw, 22, 19), u64::from(w.shared_reg_idx));
        prop_assert_eq!(bits(raw, 18, 16), u64::from(w.next_step));
        prop_assert_eq!(bits(raw, 15, 0), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4_000))]

    /// Any raw word either decodes and re-encodes to itself, or is rejected
    /// for exactly the field that is out of range.
    #[test]
    fn raw_words_decode_or_reject(raw in any::<u64>()) {
        match ConfigWord::decode(raw) {
            Ok(w) => prop_assert_eq!(w.encode(), raw),
            Err(DecodeError::ReservedBits(r)) => prop_assert_eq!(u64::from(r), bits(raw, 15, 0)),
            Err(DecodeError::BadOpcode(op)) => {
                prop_assert_eq!(bits(raw, 15, 0), 0);
                prop_assert!(op >= 16);
            }
            Err(DecodeError::BadDst(d)) => {
                prop_assert_eq!(bits(raw, 15, 0), 0);
                prop_assert!(d >= 3);
            }
        }
    }

    #[test]
    fn alu_matches_wide_arithmetic(op in 0u8..16, a in any::<u32>(), b in any::<u32>(), acc in any::<u32>()) {
        let op = Opcode::from_code(op).unwrap();
        let m = 1u64 << 32;
        let (wa, wb) = (u64::from(a), u64::from(b));
        let expected: u64 = match op {
            Opcode::Add => (wa + wb) % m,
            Opcode::Sub => (wa + m - wb) % m,
            Opcode::Mul => ((u128::from(a) * u128::from(b)) % u128::from(m)) as u64,
            Opcode::And => wa & wb,
            Opcode::Or => wa | wb,
            Opcode::Xor => wa ^ wb,
            Opcode::Shl => (wa * (1u64 << (b % 32))) % m,
            Opcode::Shr => wa / (1u64 << (b % 32)),
            Opcode::CmpLt => {
                let signed = |x: u64| if x >= m / 2 { x as i64 - m as i64 } else { x as i64 };
                u64::from(signed(wa) < signed(wb))
            }
            Opcode::Sel => if a == 0 { u64::from(acc) } else { wb },
            Opcode::Phi => if a == 0 { wb } else { u64::from(acc) },
            Opcode::Route => wa,
            Opcode::Nop | Opcode::Load | Opcode::Store | Opcode::Halt => 0,
        };
        prop_assert_eq!(u64::from(alu(op, a, b, acc)), expected);
    }

    /// Per cycle: one grant per contended bank, losers counted as conflicts,
    /// and a requester never waits more than `requesters - 1` cycles while
    /// it keeps asking for the same bank.
    #[test]
    fn arbiter_grants_and_bounded_wait(
        requesters in 1usize..32,
        banks in 1usize..17,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut arb = PaiArbiter::new(requesters, banks);
        let mut target: Vec<Option<usize>> = vec![None; requesters];
        let mut waiting = vec![0usize; requesters];
        let mut conflicts = 0u64;
        for _ in 0..200 {
            for t in target.iter_mut() {
                if t.is_none() && rng.gen_bool(0.7) {
                    *t = Some(rng.gen_range(0..banks));
                }
            }
            let granted = arb.arbitrate(&target);
            for bank in 0..banks {
                let asking = target.iter().filter(|t| **t == Some(bank)).count();
                let won = (0..requesters).filter(|&i| granted[i] && target[i] == Some(bank)).count();
                prop_assert_eq!(won, usize::from(asking > 0));
                conflicts += asking.saturating_sub(1) as u64;
            }
            for i in 0..requesters {
                prop_assert!(!granted[i] || target[i].is_some());
                if granted[i] {
                    target[i] = None;
                    waiting[i] = 0;
                } else if target[i].is_some() {
                    waiting[i] += 1;
                    prop_assert!(waiting[i] < requesters, "requester {} waited {}", i, waiting[i]);
                }
            }
        }
        prop_assert_eq!(arb.conflicts, conflicts);
    }
}

#[test]
fn saturated_bank_is_shared_evenly() {
    for n in [2usize, 5, 28] {
        let mut arb = PaiArbiter::new(n, 16);
        let all = vec![Some(0); n];
        for _ in 0..n * 1000 {
            arb.arbitrate(&all);
        }
        assert!(arb.grants.iter().all(|&g| g == 1000), "{:?}", arb.grants);
        assert_eq!(arb.conflicts, (n * 1000 * (n - 1)) as u64);
    }
}

/// Directed link counts from edge counting: a mesh has `r(c-1) + c(r-1)`
/// undirected edges, the one-hop variant adds `r(c-2) + c(r-2)` skip
/// edges, and a torus gives every PE four ports.
fn expected_links(t: Topology, r: usize, c: usize) -> usize {
    let mesh = 2 * (r * (c - 1) + c * (r - 1));
    match t {
        Topology::Mesh2D => mesh,
        Topology::OneHop => mesh + 2 * (r * c.saturating_sub(2) + c * r.saturating_sub(2)),
        Topology::Torus => 4 * r * c,
    }
}

#[test]
fn topology_degrees_follow_closed_forms() {
    for r in 2..=16 {
        for c in 2..=16 {
            for t in [Topology::Mesh2D, Topology::OneHop, Topology::Torus] {
                assert_eq!(directed_links(t, r, c), expected_links(t, r, c), "{t:?} {r}x{c}");
            }
            let corner = Coord::new(0, 0);
            assert_eq!(neighbors(Topology::Mesh2D, corner, r, c).len(), 2);
            assert_eq!(neighbors(Topology::Torus, corner, r, c).len(), 4);
            let one_hop = 2 + usize::from(r > 2) + usize::from(c > 2);
            assert_eq!(neighbors(Topology::OneHop, corner, r, c).len(), one_hop);
        }
    }
}

#[test]
fn links_are_symmetric() {
    for t in [Topology::Mesh2D, Topology::OneHop, Topology::Torus] {
        let (r, c) = (5, 7);
        for row in 0..r {
            for col in 0..c {
                let at = Coord::new(row, col);
                for (d, n) in neighbors(t, at, r, c) {
                    assert!(neighbors(t, n, r, c).contains(&(d.opposite(), at)), "{t:?} {at:?} {d:?}");
                }
            }
        }
    }
}
