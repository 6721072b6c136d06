"""This module defines data classes for travelers, road elements, trip records
and market transactions in the credit scheme simulator."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Tuple


class TripPurpose(str, Enum):
    WORK = "work"
    EDUCATION = "education"
    OTHER = "other"


class TransactionKind(str, Enum):
    ALLOCATION = "allocation"
    BUY = "buy"
    USE = "use"
    SELL = "sell"


# Id used for the regulator as buyer/seller in transaction records.
REGULATOR_ID = -1


@dataclass(frozen=True)
class Trip:
    """Represents one trip of a traveler's fixed daily trip chain.

    Attributes:
        origin: Origin node id.
        destination: Destination node id.
        preferred_arrival: Preferred arrival time T*, minutes of day.
        purpose: Activity purpose at the destination.
        preceding_activity_duration: Duration of the activity performed
            between the previous trip's arrival and this trip, in minutes.
    """

    origin: int
    destination: int
    preferred_arrival: float
    purpose: TripPurpose = TripPurpose.WORK
    preceding_activity_duration: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Trip':
        """Create an instance of Trip from a dictionary."""
        return cls(
            origin=int(data['origin']),
            destination=int(data['destination']),
            preferred_arrival=float(data['preferred_arrival']),
            purpose=TripPurpose(data.get('purpose', 'work')),
            preceding_activity_duration=float(data.get('preceding_activity_duration', 0.0))
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'origin': self.origin,
            'destination': self.destination,
            'preferred_arrival': self.preferred_arrival,
            'purpose': self.purpose.value,
            'preceding_activity_duration': self.preceding_activity_duration
        }


@dataclass(frozen=True)
class Traveler:
    """Represents a car driver of the synthetic population.

    Attributes:
        id: Traveler id, also the index into per-traveler arrays.
        vot: Value of time, $ per minute.
        sde_rate: Schedule delay early penalty, $ per minute.
        sdl_rate: Schedule delay late penalty, $ per minute.
        trips: Trip chain ordered by preferred arrival time.
    """

    id: int
    vot: float
    sde_rate: float
    sdl_rate: float
    trips: Tuple[Trip, ...] = ()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Traveler':
        """Create an instance of Traveler from a dictionary.

        Raises:
            KeyError: If required keys are missing from the dictionary.
        """
        return cls(
            id=int(data['id']),
            vot=float(data['vot']),
            sde_rate=float(data['sde_rate']),
            sdl_rate=float(data['sdl_rate']),
            trips=tuple(Trip.from_dict(t) for t in data['trips'])
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'vot': self.vot,
            'sde_rate': self.sde_rate,
            'sdl_rate': self.sdl_rate,
            'trips': [t.to_dict() for t in self.trips]
        }


@dataclass(frozen=True)
class Segment:
    """A section of homogeneous roadway.

    Attributes:
        id: Segment id.
        from_node: Upstream node id.
        to_node: Downstream node id.
        length: Length in meters.
        vf: Free-flow speed in km/h.
        capacity: Discharge capacity in vehicles per hour.
        kjam: Jam density in vehicles per km per lane.
        lanes: Number of lanes.
        signal: Whether the downstream node is signalized.
        highway: Whether the segment is part of a highway.
    """

    id: int
    from_node: int
    to_node: int
    length: float
    vf: float
    capacity: float
    kjam: float
    lanes: int = 1
    signal: bool = False
    highway: bool = False

    @property
    def free_flow_time(self) -> float:
        """Free-flow traversal time in minutes."""
        return self.length / 1000.0 / self.vf * 60.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Segment':
        return cls(
            id=int(data['id']),
            from_node=int(data['from']),
            to_node=int(data['to']),
            length=float(data['length_m']),
            vf=float(data['vf_kmh']),
            capacity=float(data['capacity_veh_per_h']),
            kjam=float(data['kjam_veh_per_km']),
            lanes=int(data.get('lanes', 1)),
            signal=bool(int(data.get('signal', 0))),
            highway=bool(int(data.get('highway', 0)))
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'from': self.from_node,
            'to': self.to_node,
            'length_m': self.length,
            'vf_kmh': self.vf,
            'capacity_veh_per_h': self.capacity,
            'kjam_veh_per_km': self.kjam,
            'lanes': self.lanes,
            'signal': int(self.signal),
            'highway': int(self.highway)
        }


@dataclass(frozen=True)
class Path:
    """A route between an OD pair, described by its segment chain.

    Attributes:
        segments: Ordered segment ids.
        total_distance: Sum of segment lengths, meters.
        signal_count: Number of signalized segments traversed.
        highway_distance: Meters driven on highway segments.
        free_flow_time: Sum of segment free-flow times, minutes.
        path_size: Overlap correction within its choice set, in (0, 1].
    """

    segments: Tuple[int, ...]
    total_distance: float
    signal_count: int
    highway_distance: float
    free_flow_time: float
    path_size: float = 1.0


@dataclass(frozen=True)
class Transaction:
    """A credit transaction recorded by the market.

    Attributes:
        kind: Allocation, buy, use or sell.
        buyer: Receiving party (the regulator is REGULATOR_ID).
        seller: Delivering party.
        amount: Number of credits.
        time: Minutes of day.
        day: Day index (1-based).
        price: Unit price in $ per credit on that day.
        fee: Transaction fee paid, $.
    """

    kind: TransactionKind
    buyer: int
    seller: int
    amount: int
    time: float
    day: int
    price: float
    fee: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'day': self.day,
            'time': self.time,
            'kind': self.kind.value,
            'buyer': self.buyer,
            'seller': self.seller,
            'amount': self.amount,
            'price': self.price,
            'fee': self.fee
        }


@dataclass
class TripRecord:
    """Realized outcome of one trip on one day.

    Attributes:
        traveler: Traveler id.
        trip_index: Position of the trip in the traveler's chain.
        departure: Departure time, minutes of day.
        arrival: Arrival time, minutes of day (may exceed 1440).
        travel_time: Realized travel time TT, minutes.
        distance: Path length, meters.
        path_id: Index of the chosen path within the OD choice set.
        free_flow_time: Free-flow travel time TT^ff of the path, minutes.
        predicted_time: Travel time predicted from the learned link table.
        charged_credits: Credits charged at departure.
        preferred_arrival: T* of the trip, minutes of day.
        schedule_delay_early: max(T* - arrival, 0), minutes.
        schedule_delay_late: max(arrival - T*, 0), minutes.
        price: Credit price on that day.
        utility: Experienced systematic utility of the trip.
    """

    traveler: int
    trip_index: int
    departure: float
    arrival: float
    travel_time: float
    distance: float
    path_id: int
    free_flow_time: float
    predicted_time: float
    charged_credits: int = 0
    preferred_arrival: float = 0.0
    schedule_delay_early: float = 0.0
    schedule_delay_late: float = 0.0
    price: float = 0.0
    utility: float = 0.0
    segments: List[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'traveler': self.traveler,
            'trip_index': self.trip_index,
            'departure': self.departure,
            'arrival': self.arrival,
            'travel_time': self.travel_time,
            'distance': self.distance,
            'path_id': self.path_id,
            'free_flow_time': self.free_flow_time,
            'predicted_time': self.predicted_time,
            'charged_credits': self.charged_credits,
            'preferred_arrival': self.preferred_arrival,
            'schedule_delay_early': self.schedule_delay_early,
            'schedule_delay_late': self.schedule_delay_late,
            'price': self.price,
            'utility': self.utility
        }


@dataclass(frozen=True)
class NetworkDescription:
    """Node and segment tables of a road network.

    Attributes:
        nodes: Node ids.
        segments: Directed segments, ids unique.
    """

    nodes: Tuple[int, ...]
    segments: Tuple[Segment, ...]
