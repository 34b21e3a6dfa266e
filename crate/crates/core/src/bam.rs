//! Per-link bandwidth allocation ledger with maximum-allocation semantics.
//!
//! Each of the three traffic classes owns a hard slice of the link
//! (its bandwidth constraint). Reservations are admitted into a class only if
//! that class has headroom. A reservation that lives outside its native class
//! is *borrowed* and is accounted in the column of the class it occupies.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::topology::LinkId;

/// One of the three traffic classes, TC0 (low priority) to TC2 (high).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrafficClassId(u8);

impl TrafficClassId {
    pub const TC0: TrafficClassId = TrafficClassId(0);
    pub const TC1: TrafficClassId = TrafficClassId(1);
    pub const TC2: TrafficClassId = TrafficClassId(2);
    pub const ALL: [TrafficClassId; CLASS_COUNT] = [Self::TC0, Self::TC1, Self::TC2];

    pub fn new(index: u8) -> Option<Self> {
        (usize::from(index) < CLASS_COUNT).then_some(TrafficClassId(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for TrafficClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TC{}", self.0)
    }
}

pub const CLASS_COUNT: usize = 3;

/// Per-class rates in bits/s, indexed by class.
pub type ClassRates = [u64; CLASS_COUNT];

/// A fraction of link capacity in parts per million, so that sums are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fraction(u32);

impl Fraction {
    pub const ONE: Fraction = Fraction(1_000_000);

    pub fn from_ppm(ppm: u32) -> Self {
        Fraction(ppm)
    }

    /// Rounds to the nearest part per million. Non-finite or negative input
    /// maps to zero, which `configure` rejects.
    pub fn from_f64(value: f64) -> Self {
        if !value.is_finite() || value <= 0.0 {
            return Fraction(0);
        }
        Fraction((value * 1e6).round().min(u32::MAX as f64) as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 1e6
    }

    /// `floor(capacity × fraction)`.
    pub fn of(self, capacity: u64) -> u64 {
        (u128::from(capacity) * u128::from(self.0) / 1_000_000) as u64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandwidthConstraint {
    pub class: TrafficClassId,
    pub fraction: Fraction,
}

impl BandwidthConstraint {
    pub fn new(class: TrafficClassId, fraction: f64) -> Self {
        BandwidthConstraint {
            class,
            fraction: Fraction::from_f64(fraction),
        }
    }

    /// Constraints for TC0..TC2 in order.
    pub fn from_fractions(fractions: [f64; CLASS_COUNT]) -> Vec<Self> {
        TrafficClassId::ALL
            .iter()
            .zip(fractions)
            .map(|(&c, f)| Self::new(c, f))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReservationId(u64);

impl fmt::Display for ReservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservationKind {
    Native,
    Borrowed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub id: ReservationId,
    pub link: LinkId,
    /// Class whose column the rate currently occupies.
    pub class: TrafficClassId,
    pub native_class: TrafficClassId,
    pub rate: u64,
    pub kind: ReservationKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BamError {
    #[error("invalid bandwidth constraints: {0}")]
    InvalidConstraints(String),
    #[error("{class} rejected request: only {headroom} bit/s of headroom")]
    Rejected { class: TrafficClassId, headroom: u64 },
    #[error("{class} has only {headroom} bit/s of headroom, {needed} needed")]
    InsufficientHeadroom {
        class: TrafficClassId,
        headroom: u64,
        needed: u64,
    },
    #[error("unknown reservation {0}")]
    UnknownReservation(ReservationId),
    #[error("reservation rate must be positive")]
    ZeroRate,
}

/// The ledger for one link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkBamState {
    link: LinkId,
    capacity: u64,
    fractions: [Fraction; CLASS_COUNT],
    limits: ClassRates,
    allocated: ClassRates,
    borrowed: ClassRates,
    reservations: BTreeMap<ReservationId, Reservation>,
    next_id: u64,
}

impl LinkBamState {
    pub fn configure(link: LinkId, capacity: u64, constraints: &[BandwidthConstraint]) -> Result<Self, BamError> {
        let mut fractions: [Option<Fraction>; CLASS_COUNT] = [None; CLASS_COUNT];
        for bc in constraints {
            let slot = &mut fractions[bc.class.index()];
            if slot.is_some() {
                return Err(BamError::InvalidConstraints(format!("{} configured twice", bc.class)));
            }
            if bc.fraction.ppm() == 0 || bc.fraction > Fraction::ONE {
                return Err(BamError::InvalidConstraints(format!(
                    "{} fraction {} is outside (0, 1]",
                    bc.class, bc.fraction
                )));
            }
            *slot = Some(bc.fraction);
        }
        let mut resolved = [Fraction::ONE; CLASS_COUNT];
        for (c, f) in fractions.iter().enumerate() {
            resolved[c] = f.ok_or_else(|| BamError::InvalidConstraints(format!("TC{c} missing")))?;
        }
        let total: u32 = resolved.iter().map(|f| f.ppm()).sum();
        if total > Fraction::ONE.ppm() {
            return Err(BamError::InvalidConstraints(format!(
                "fractions sum to {} > 1",
                f64::from(total) / 1e6
            )));
        }
        Ok(LinkBamState {
            link,
            capacity,
            fractions: resolved,
            limits: resolved.map(|f| f.of(capacity)),
            allocated: [0; CLASS_COUNT],
            borrowed: [0; CLASS_COUNT],
            reservations: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn link(&self) -> &LinkId {
        &self.link
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn fraction(&self, class: TrafficClassId) -> Fraction {
        self.fractions[class.index()]
    }

    /// Per-class limits `fraction × capacity`.
    pub fn limits(&self) -> ClassRates {
        self.limits
    }

    pub fn limit(&self, class: TrafficClassId) -> u64 {
        self.limits[class.index()]
    }

    pub fn allocated(&self) -> ClassRates {
        self.allocated
    }

    pub fn borrowed(&self) -> ClassRates {
        self.borrowed
    }

    pub fn headroom(&self, class: TrafficClassId) -> u64 {
        let c = class.index();
        self.limits[c].saturating_sub(self.allocated[c] + self.borrowed[c])
    }

    pub fn reservation(&self, id: ReservationId) -> Option<&Reservation> {
        self.reservations.get(&id)
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    pub fn total_reserved(&self) -> u64 {
        self.allocated.iter().sum::<u64>() + self.borrowed.iter().sum::<u64>()
    }

    /// Admits a native reservation into `class`. All-or-nothing.
    pub fn admit(&mut self, class: TrafficClassId, rate: u64) -> Result<Reservation, BamError> {
        self.admit_into(class, class, rate)
    }

    /// Admits a reservation whose native class is `native_class` directly into
    /// `class`. When the two differ the reservation is borrowed.
    pub fn admit_into(
        &mut self,
        native_class: TrafficClassId,
        class: TrafficClassId,
        rate: u64,
    ) -> Result<Reservation, BamError> {
        if rate == 0 {
            return Err(BamError::ZeroRate);
        }
        let headroom = self.headroom(class);
        if rate > headroom {
            return Err(BamError::Rejected { class, headroom });
        }
        let kind = if class == native_class {
            ReservationKind::Native
        } else {
            ReservationKind::Borrowed
        };
        let id = ReservationId(self.next_id);
        self.next_id += 1;
        let reservation = Reservation {
            id,
            link: self.link.clone(),
            class,
            native_class,
            rate,
            kind,
        };
        self.column(kind)[class.index()] += rate;
        self.reservations.insert(id, reservation.clone());
        Ok(reservation)
    }

    pub fn release(&mut self, id: ReservationId) -> Result<Reservation, BamError> {
        let r = self.reservations.remove(&id).ok_or(BamError::UnknownReservation(id))?;
        self.column(r.kind)[r.class.index()] -= r.rate;
        Ok(r)
    }

    /// Moves a reservation into `to_class`. Moving it back into its native
    /// class makes it native again.
    pub fn reassign(&mut self, id: ReservationId, to_class: TrafficClassId) -> Result<Reservation, BamError> {
        let r = self
            .reservations
            .get(&id)
            .ok_or(BamError::UnknownReservation(id))?
            .clone();
        if r.class == to_class {
            return Ok(r);
        }
        let headroom = self.headroom(to_class);
        if r.rate > headroom {
            return Err(BamError::InsufficientHeadroom {
                class: to_class,
                headroom,
                needed: r.rate,
            });
        }
        self.column(r.kind)[r.class.index()] -= r.rate;
        let kind = if to_class == r.native_class {
            ReservationKind::Native
        } else {
            ReservationKind::Borrowed
        };
        self.column(kind)[to_class.index()] += r.rate;
        let updated = Reservation {
            class: to_class,
            kind,
            ..r
        };
        self.reservations.insert(id, updated.clone());
        Ok(updated)
    }

    /// Changes a reservation's rate in place. Growing needs headroom in the
    /// class the reservation occupies.
    pub fn resize(&mut self, id: ReservationId, rate: u64) -> Result<Reservation, BamError> {
        if rate == 0 {
            return Err(BamError::ZeroRate);
        }
        let r = self
            .reservations
            .get(&id)
            .ok_or(BamError::UnknownReservation(id))?
            .clone();
        if rate > r.rate {
            let headroom = self.headroom(r.class);
            if rate - r.rate > headroom {
                return Err(BamError::InsufficientHeadroom {
                    class: r.class,
                    headroom,
                    needed: rate - r.rate,
                });
            }
        }
        let column = &mut self.column(r.kind)[r.class.index()];
        *column = *column - r.rate + rate;
        let updated = Reservation { rate, ..r };
        self.reservations.insert(id, updated.clone());
        Ok(updated)
    }

    fn column(&mut self, kind: ReservationKind) -> &mut ClassRates {
        match kind {
            ReservationKind::Native => &mut self.allocated,
            ReservationKind::Borrowed => &mut self.borrowed,
        }
    }

    /// Checks the per-class and total caps plus column consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut allocated = [0u64; CLASS_COUNT];
        let mut borrowed = [0u64; CLASS_COUNT];
        for r in self.reservations.values() {
            if r.rate == 0 {
                return Err(format!("{} has zero rate", r.id));
            }
            let expect = if r.class == r.native_class {
                ReservationKind::Native
            } else {
                ReservationKind::Borrowed
            };
            if r.kind != expect {
                return Err(format!("{} kind {:?} inconsistent with its class", r.id, r.kind));
            }
            match r.kind {
                ReservationKind::Native => allocated[r.class.index()] += r.rate,
                ReservationKind::Borrowed => borrowed[r.class.index()] += r.rate,
            }
        }
        if allocated != self.allocated || borrowed != self.borrowed {
            return Err("column totals disagree with reservations".into());
        }
        for c in 0..CLASS_COUNT {
            if self.allocated[c] + self.borrowed[c] > self.limits[c] {
                return Err(format!("TC{c} over its constraint"));
            }
        }
        if self.total_reserved() > self.capacity {
            return Err("link over capacity".into());
        }
        Ok(())
    }

    /// True when no reservation is held, regardless of id counter state.
    pub fn is_empty(&self) -> bool {
        self.reservations.is_empty() && self.allocated == [0; CLASS_COUNT] && self.borrowed == [0; CLASS_COUNT]
    }
}
