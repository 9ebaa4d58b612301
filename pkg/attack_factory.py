from base_attack import BaseAttack
from core import UsageError

ATTACK_NAMES = ('lira_online', 'lira_offline', 'threshold')


def get_attack(name: str, variance_mode: str = "fixed") -> BaseAttack:
    """
    Factory function to instantiate a membership inference attack by name.

    Args:
        name: one of ATTACK_NAMES ('online'/'offline' are accepted as shorthands)
        variance_mode: 'fixed' or 'per_example' (ignored by the threshold attack)

    Returns:
        An instance of a class that inherits from BaseAttack
    """
    attack_name = name.lower()

    if attack_name in ('lira_online', 'online'):
        from attack import LiraOnlineAttack
        return LiraOnlineAttack(variance_mode)
    elif attack_name in ('lira_offline', 'offline'):
        from attack import LiraOfflineAttack
        return LiraOfflineAttack(variance_mode)
    elif attack_name == 'threshold':
        from attack import ThresholdAttack
        return ThresholdAttack(variance_mode)
    else:
        raise UsageError(f"Unsupported attack: {name}. Supported: {', '.join(ATTACK_NAMES)}")
